//! Device runtime: one forward pass per local sample, taps plus deviations
//! out, nothing back in.

use std::sync::Arc;

use serde::Serialize;

use crate::alignment::AlignmentPlan;
use crate::backbone::{BackboneConfig, FrozenBackbone, TokenBatch};
use crate::data::{LocalShard, Sample};
use crate::error::{Error, Result};
use crate::sidenet::compute_deviation;
use crate::wire::{payload_bytes, ActivationPacket};

pub fn token_batch(samples: &[Sample]) -> Result<TokenBatch> {
    let rows: Vec<&[u32]> = samples.iter().map(|s| s.tokens.as_slice()).collect();
    TokenBatch::new(&rows)
}

/// Forwards the shard's next batch and packages taps plus `Δy`.
pub fn process_batch(
    backbone: &FrozenBackbone,
    plan: &AlignmentPlan,
    shard: &mut LocalShard,
    batch_size: usize,
) -> Result<ActivationPacket> {
    let client_id = shard.client_id;
    let taps = plan.taps(backbone.id())?;
    let batch = shard
        .next_batch(batch_size)
        .ok_or(Error::EndOfData(client_id))?;
    let tokens = token_batch(batch)?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label as usize).collect();
    let ids: Vec<u32> = batch.iter().map(|s| s.id).collect();
    let (logits, blocks) = backbone.forward_with_taps(&tokens, taps)?;
    let deviation = compute_deviation(&logits, &labels)?;
    ActivationPacket::new(client_id, backbone.id(), ids, &blocks, &deviation)
}

/// A device holding a frozen backbone and its local shard.
#[derive(Clone, Debug)]
pub struct Client {
    pub backbone: Arc<FrozenBackbone>,
    pub shard: LocalShard,
    pub batch_size: usize,
}

impl Client {
    pub fn new(backbone: Arc<FrozenBackbone>, shard: LocalShard, batch_size: usize) -> Self {
        Client {
            backbone,
            shard,
            batch_size,
        }
    }

    pub fn id(&self) -> u32 {
        self.shard.client_id
    }

    pub fn is_done(&self) -> bool {
        self.shard.is_exhausted()
    }

    /// Size of the batch `next_packet` would produce.
    pub fn next_batch_len(&self) -> usize {
        self.shard.remaining().min(self.batch_size)
    }

    pub fn next_packet(&mut self, plan: &AlignmentPlan) -> Result<ActivationPacket> {
        process_batch(&self.backbone, plan, &mut self.shard, self.batch_size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClientCost {
    pub num_batches: usize,
    pub flops: f64,
    pub upload_bytes: u64,
    pub peak_mem_bytes: u64,
}

/// Batch sizes of a single pass over `n` samples.
pub fn batch_sizes(n: usize, batch_size: usize) -> impl Iterator<Item = usize> {
    let bs = batch_size.max(1);
    (0..n.div_ceil(bs)).map(move |k| bs.min(n - k * bs))
}

/// Forward-only cost of one pass over `shard_len` samples.
///
/// Memory is the parameters plus the live working set of one batch (one
/// layer's activations and the retained taps); there is no optimizer state
/// and no autograd tape on the device.
pub fn client_cost(
    cfg: &BackboneConfig,
    plan: &AlignmentPlan,
    shard_len: usize,
    batch_size: usize,
    seq: usize,
    elem_bytes: usize,
) -> ClientCost {
    let b = plan.block_count;
    let mut flops = 0.0;
    let mut bytes = 0u64;
    let mut batches = 0;
    for n in batch_sizes(shard_len, batch_size) {
        flops += cfg.forward_flops(seq, n);
        bytes += payload_bytes(cfg.id.len(), b, n, seq, cfg.hidden, cfg.num_classes) as u64;
        batches += 1;
    }
    let live = batch_size.min(shard_len.max(1)) * (cfg.live_activation_elems(seq) + b * seq * cfg.hidden);
    ClientCost {
        num_batches: batches,
        flops,
        upload_bytes: bytes,
        peak_mem_bytes: ((cfg.num_params() + live) * elem_bytes) as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{make_plan, DSideRule};
    use crate::backbone::build;
    use crate::data::SyntheticTask;
    use crate::tensor;
    use crate::wire::framing_bytes;

    fn setup(n: usize) -> (FrozenBackbone, AlignmentPlan, LocalShard) {
        let cfg = BackboneConfig::desk("mid", 8, 64, 64, 4);
        let plan = make_plan(std::slice::from_ref(&cfg), DSideRule::Auto).unwrap();
        let task = SyntheticTask {
            vocab: 64,
            num_classes: 4,
            seq: 32,
            signal: 1.0,
            subset_size: 8,
            seed: 1,
        };
        let d = task.generate(n).unwrap();
        (build(&cfg).unwrap(), plan, LocalShard::new(3, d.samples))
    }

    #[test]
    fn single_pass_packets() {
        let (bb, plan, mut shard) = setup(21);
        let before = bb.checksum();
        let mut ids = Vec::new();
        let mut packets = 0;
        loop {
            match process_batch(&bb, &plan, &mut shard, 8) {
                Ok(p) => {
                    assert!(p.blocks.iter().all(|b| b.shape() == [p.batch(), 32, 64]));
                    assert_eq!(p.block_count(), 8);
                    ids.extend(p.sample_ids.iter().copied());
                    packets += 1;
                }
                Err(Error::EndOfData(3)) => break,
                Err(e) => panic!("{e}"),
            }
        }
        assert_eq!(packets, 3);
        ids.sort_unstable();
        assert_eq!(ids, (0..21).collect::<Vec<_>>());
        assert_eq!(bb.checksum(), before);
    }

    #[test]
    fn packet_carries_no_tokens_or_labels() {
        let (bb, plan, mut shard) = setup(8);
        let p = process_batch(&bb, &plan, &mut shard, 8).unwrap();
        // Exhaustive destructuring: adding a field breaks this audit.
        let ActivationPacket {
            client_id: _,
            backbone_id: _,
            sample_ids: _,
            seq_len: _,
            blocks: _,
            deviation,
            epoch_flag,
        } = p;
        assert_eq!(epoch_flag, 0);
        for row in deviation.data().chunks(4) {
            assert!(row.iter().sum::<f64>().abs() < 1e-2);
        }
    }

    #[test]
    fn payload_closed_form() {
        let (bb, plan, mut shard) = setup(8);
        let p = process_batch(&bb, &plan, &mut shard, 8).unwrap();
        let want = 8 * (8 * 32 * 64 * 2) + 8 * 4 * 2 + framing_bytes(3, 8);
        assert_eq!(p.payload_bytes(), want);
        assert_eq!(p.encode().len(), want);
        let cost = client_cost(bb.config(), &plan, 8, 8, 32, 8);
        assert_eq!(cost.upload_bytes, want as u64);
    }

    #[test]
    fn cost_flops_match_traced_matmuls() {
        let (bb, plan, shard) = setup(20);
        let cost = client_cost(bb.config(), &plan, shard.len(), 8, 32, 8);
        let mut traced = 0u64;
        for chunk in shard.samples.chunks(8) {
            let tb = token_batch(chunk).unwrap();
            traced += tensor::trace_matmul_flops(|| bb.forward_with_taps(&tb, plan.taps("mid").unwrap()).unwrap()).1;
        }
        let rel = (cost.flops - traced as f64).abs() / traced as f64;
        assert!(rel < 0.01, "rel {rel}");
        assert_eq!(cost.num_batches, 3);
    }

    #[test]
    fn peak_memory_is_inference_level() {
        let (bb, plan, _) = setup(8);
        let cfg = bb.config();
        let cost = client_cost(cfg, &plan, 100, 8, 32, 2);
        let params = cfg.num_params() * 2;
        let one_batch = 8 * (cfg.live_activation_elems(32) + 8 * 32 * 64) * 2;
        assert_eq!(cost.peak_mem_bytes, (params + one_batch) as u64);
        // Independent of how many batches the pass takes.
        assert_eq!(client_cost(cfg, &plan, 1000, 8, 32, 2).peak_mem_bytes, cost.peak_mem_bytes);
    }
}
