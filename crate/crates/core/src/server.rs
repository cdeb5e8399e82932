//! Asynchronous trainer: a step on every arrival, replay from a shuffled
//! cache while idle, and standalone epochs once every client has finished.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::FrozenBackbone;
use crate::client::token_batch;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::sidenet::{SideInput, SideNetwork};
use crate::tensor::Tensor;
use crate::wire::{ActivationPacket, Cursor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Streaming,
    Standalone,
    Done,
}

/// A cached packet with its arrival metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheRecord {
    pub record_id: u64,
    pub arrival_time: f64,
    pub packet: Arc<ActivationPacket>,
}

impl CacheRecord {
    /// Packet bytes followed by record id (u64) and arrival time (f64).
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.packet.encode();
        out.extend_from_slice(&self.record_id.to_le_bytes());
        out.extend_from_slice(&self.arrival_time.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(bytes);
        let packet = ActivationPacket::decode_from(&mut c)?;
        let record_id = c.u64()?;
        let arrival_time = c.f64()?;
        c.finish()?;
        Ok(CacheRecord {
            record_id,
            arrival_time,
            packet: Arc::new(packet),
        })
    }
}

pub const SPILL_FILE: &str = "cache.spill";

/// Reads every u32-length-prefixed record of a spill file.
pub fn read_spill(path: &Path) -> Result<Vec<CacheRecord>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor::new(&bytes);
    let mut out = Vec::new();
    while !c.is_empty() {
        let n = c.u32()? as usize;
        out.push(CacheRecord::decode(c.take(n)?)?);
    }
    Ok(out)
}

/// One cached sample: row `row` of record `record_id`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SampleRef {
    pub client_id: u32,
    pub sample_id: u32,
    pub record_id: u64,
    pub row: usize,
}

/// Records stored in a randomly shuffled order. Sampling goes through a
/// canonical `(client_id, sample_id)` index so that, given the sampling
/// seed, draws do not depend on the order packets arrived in.
#[derive(Debug)]
pub struct ActivationCache {
    records: Vec<CacheRecord>,
    by_id: BTreeMap<u64, Arc<ActivationPacket>>,
    index: Vec<SampleRef>,
    rng: ChaCha8Rng,
    next_id: u64,
    spill: Option<BufWriter<File>>,
    spill_path: Option<PathBuf>,
}

impl ActivationCache {
    pub fn new(rng: ChaCha8Rng) -> Self {
        ActivationCache {
            records: Vec::new(),
            by_id: BTreeMap::new(),
            index: Vec::new(),
            rng,
            next_id: 0,
            spill: None,
            spill_path: None,
        }
    }

    /// Also appends every inserted record to `dir/cache.spill`.
    pub fn with_spill(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(SPILL_FILE);
        let f = OpenOptions::new().create(true).write(true).truncate(true).open(&path)?;
        self.spill = Some(BufWriter::new(f));
        self.spill_path = Some(path);
        Ok(self)
    }

    pub fn spill_path(&self) -> Option<&Path> {
        self.spill_path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_samples(&self) -> usize {
        self.index.len()
    }

    pub fn records(&self) -> &[CacheRecord] {
        &self.records
    }

    pub fn samples(&self) -> &[SampleRef] {
        &self.index
    }

    pub fn insert(&mut self, packet: Arc<ActivationPacket>, arrival_time: f64) -> Result<u64> {
        let record_id = self.next_id;
        for (row, &sid) in packet.sample_ids.iter().enumerate() {
            let r = SampleRef {
                client_id: packet.client_id,
                sample_id: sid,
                record_id,
                row,
            };
            let pos = self.index.partition_point(|x| (x.client_id, x.sample_id) < (r.client_id, r.sample_id));
            if self
                .index
                .get(pos)
                .is_some_and(|x| (x.client_id, x.sample_id) == (r.client_id, r.sample_id))
            {
                return Err(Error::Protocol(format!(
                    "sample {sid} of client {} uploaded twice",
                    packet.client_id
                )));
            }
            self.index.insert(pos, r);
        }
        self.next_id += 1;
        let rec = CacheRecord {
            record_id,
            arrival_time,
            packet: packet.clone(),
        };
        if let Some(w) = self.spill.as_mut() {
            let bytes = rec.encode();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(&bytes)?;
            w.flush()?;
        }
        let pos = self.rng.random_range(0..=self.records.len());
        self.records.insert(pos, rec);
        self.by_id.insert(record_id, packet);
        Ok(record_id)
    }

    pub fn packet(&self, record_id: u64) -> Option<&Arc<ActivationPacket>> {
        self.by_id.get(&record_id)
    }

    /// Gathers sampled rows into one batch per backbone type.
    pub fn assemble(&self, refs: &[SampleRef]) -> Result<Vec<MiniBatch>> {
        let mut groups: BTreeMap<&str, Vec<(&ActivationPacket, usize)>> = BTreeMap::new();
        for r in refs {
            let p = self
                .by_id
                .get(&r.record_id)
                .ok_or_else(|| Error::State(format!("no cached record {}", r.record_id)))?;
            groups.entry(p.backbone_id.as_str()).or_default().push((p, r.row));
        }
        groups
            .into_iter()
            .map(|(id, rows)| {
                let b = rows[0].0.block_count();
                let blocks = (0..b)
                    .map(|j| {
                        let parts: Vec<Tensor> = rows
                            .iter()
                            .map(|(p, row)| p.blocks[j].gather_rows(&[*row]))
                            .collect::<Result<_>>()?;
                        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
                    })
                    .collect::<Result<Vec<_>>>()?;
                let devs: Vec<Tensor> = rows
                    .iter()
                    .map(|(p, row)| p.deviation.gather_rows(&[*row]))
                    .collect::<Result<_>>()?;
                Ok(MiniBatch {
                    backbone_id: id.to_string(),
                    blocks,
                    deviation: Tensor::concat_rows(&devs.iter().collect::<Vec<_>>())?,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct MiniBatch {
    pub backbone_id: String,
    pub blocks: Vec<Tensor>,
    pub deviation: Tensor,
}

pub fn as_inputs(batches: &[MiniBatch]) -> Vec<SideInput<'_>> {
    batches
        .iter()
        .map(|m| SideInput {
            backbone_id: &m.backbone_id,
            blocks: &m.blocks,
            deviation: &m.deviation,
        })
        .collect()
}

/// One line of the JSON-lines event log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogEvent {
    pub t: f64,
    pub event: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub client_id: Option<u32>,
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    pub phase: Phase,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub opt: AdamW,
    pub k_arrival: usize,
    pub minibatch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            opt: AdamW::default(),
            k_arrival: 1,
            minibatch: 8,
        }
    }
}

#[derive(Debug)]
pub struct Server {
    net: SideNetwork,
    cache: ActivationCache,
    train: TrainConfig,
    clients: BTreeSet<u32>,
    finished: BTreeSet<u32>,
    phase: Phase,
    replay_rng: ChaCha8Rng,
    pending: Vec<Vec<SampleRef>>,
    pub arrival_steps: u64,
    pub replay_steps: u64,
    pub standalone_steps: u64,
    pub packets_received: u64,
    pub log: Vec<LogEvent>,
}

impl Server {
    /// `clients` are the ids expected to upload; the phase leaves streaming
    /// once each has signaled end-of-data.
    pub fn new(net: SideNetwork, cache: ActivationCache, train: TrainConfig, clients: impl IntoIterator<Item = u32>, replay_rng: ChaCha8Rng) -> Self {
        let clients: BTreeSet<u32> = clients.into_iter().collect();
        let phase = if clients.is_empty() { Phase::Standalone } else { Phase::Streaming };
        Server {
            net,
            cache,
            train,
            clients,
            finished: BTreeSet::new(),
            phase,
            replay_rng,
            pending: Vec::new(),
            arrival_steps: 0,
            replay_steps: 0,
            standalone_steps: 0,
            packets_received: 0,
            log: Vec::new(),
        }
    }

    pub fn net(&self) -> &SideNetwork {
        &self.net
    }

    pub fn into_net(self) -> SideNetwork {
        self.net
    }

    /// Copy for evaluation between steps.
    pub fn snapshot(&self) -> SideNetwork {
        self.net.clone()
    }

    pub fn cache(&self) -> &ActivationCache {
        &self.cache
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn total_steps(&self) -> u64 {
        self.arrival_steps + self.replay_steps + self.standalone_steps
    }

    fn record(&mut self, t: f64, event: &str, client_id: Option<u32>, loss: Option<f64>) {
        self.log.push(LogEvent {
            t,
            event: event.to_string(),
            client_id,
            step: self.total_steps(),
            loss,
            phase: self.phase,
        });
    }

    fn step(&mut self, inputs: &[SideInput<'_>]) -> Result<f64> {
        let loss = self.net.train_step(inputs, &self.train.opt)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss {loss}")));
        }
        Ok(loss)
    }

    /// `k_arrival` steps on the packet, then caches it.
    pub fn on_packet(&mut self, packet: ActivationPacket, t: f64) -> Result<f64> {
        let cid = packet.client_id;
        if self.phase != Phase::Streaming {
            return Err(Error::Phase(format!("packet from client {cid} after streaming ended")));
        }
        if !self.clients.contains(&cid) {
            return Err(Error::Protocol(format!("packet from unknown client {cid}")));
        }
        if self.finished.contains(&cid) {
            return Err(Error::Protocol(format!("packet from client {cid} after its end-of-data")));
        }
        if packet.block_count() != self.net.plan().block_count {
            return Err(Error::Protocol(format!(
                "packet from client {cid} has {} blocks, plan has {}",
                packet.block_count(),
                self.net.plan().block_count
            )));
        }
        let packet = Arc::new(packet);
        let mut loss = 0.0;
        for _ in 0..self.train.k_arrival {
            loss = self.step(&[SideInput::from(packet.as_ref())])?;
            self.arrival_steps += 1;
        }
        self.packets_received += 1;
        self.cache.insert(packet, t)?;
        self.record(t, "arrival_step", Some(cid), Some(loss));
        Ok(loss)
    }

    pub fn end_of_data(&mut self, client_id: u32, t: f64) -> Result<()> {
        if !self.clients.contains(&client_id) {
            return Err(Error::Protocol(format!("end-of-data from unknown client {client_id}")));
        }
        if !self.finished.insert(client_id) {
            return Err(Error::Protocol(format!("client {client_id} signaled end-of-data twice")));
        }
        self.record(t, "end_of_data", Some(client_id), None);
        if self.finished.len() == self.clients.len() {
            self.phase = Phase::Standalone;
            self.record(t, "phase_standalone", None, None);
        }
        Ok(())
    }

    /// Draws a uniform minibatch from the cache (`None` if it is empty).
    pub fn draw_replay(&mut self) -> Option<Vec<SampleRef>> {
        let n = self.cache.num_samples();
        if n == 0 {
            return None;
        }
        let k = self.train.minibatch.min(n);
        let mut idx = sample(&mut self.replay_rng, n, k).into_vec();
        idx.sort_unstable();
        Some(idx.into_iter().map(|i| self.cache.samples()[i]).collect())
    }

    fn step_on(&mut self, refs: &[SampleRef]) -> Result<f64> {
        let batches = self.cache.assemble(refs)?;
        self.step(&as_inputs(&batches))
    }

    /// One replay step on previously drawn samples.
    pub fn replay_on(&mut self, refs: &[SampleRef], t: f64) -> Result<f64> {
        if self.phase != Phase::Streaming {
            return Err(Error::Phase("replay outside streaming".into()));
        }
        let loss = self.step_on(refs)?;
        self.replay_steps += 1;
        self.record(t, "replay_step", None, Some(loss));
        Ok(loss)
    }

    /// One replay step on a uniform minibatch; `None` if the cache is empty.
    pub fn replay_step(&mut self, t: f64) -> Result<Option<f64>> {
        if self.phase != Phase::Streaming {
            return Err(Error::Phase("replay outside streaming".into()));
        }
        match self.draw_replay() {
            None => Ok(None),
            Some(refs) => self.replay_on(&refs, t).map(Some),
        }
    }

    /// Up to `budget` replay steps; returns how many were taken.
    pub fn idle_replay(&mut self, budget: usize, t: f64) -> Result<usize> {
        let mut taken = 0;
        while taken < budget {
            if self.replay_step(t)?.is_none() {
                break;
            }
            taken += 1;
        }
        Ok(taken)
    }

    /// Queues `epochs` shuffled passes over the cache in minibatches.
    pub fn begin_standalone(&mut self, epochs: usize) -> Result<usize> {
        if self.phase != Phase::Standalone {
            return Err(Error::Phase(format!("standalone tuning requested during {:?}", self.phase)));
        }
        let mut batches = Vec::new();
        for _ in 0..epochs {
            let mut order = self.cache.samples().to_vec();
            order.shuffle(&mut self.replay_rng);
            for chunk in order.chunks(self.train.minibatch.max(1)) {
                batches.push(chunk.to_vec());
            }
        }
        batches.reverse();
        self.pending = batches;
        Ok(self.pending.len())
    }

    /// Samples of the next queued standalone step.
    pub fn peek_standalone(&self) -> Option<&[SampleRef]> {
        self.pending.last().map(Vec::as_slice)
    }

    /// Next queued standalone step; moves to `Done` once the queue drains.
    pub fn standalone_step(&mut self, t: f64) -> Result<Option<f64>> {
        if self.phase != Phase::Standalone {
            return Err(Error::Phase(format!("standalone step during {:?}", self.phase)));
        }
        match self.pending.pop() {
            Some(refs) => {
                let loss = self.step_on(&refs)?;
                self.standalone_steps += 1;
                self.record(t, "standalone_step", None, Some(loss));
                if self.pending.is_empty() {
                    self.finish(t);
                }
                Ok(Some(loss))
            }
            None => {
                self.finish(t);
                Ok(None)
            }
        }
    }

    fn finish(&mut self, t: f64) {
        if self.phase != Phase::Done {
            self.phase = Phase::Done;
            self.record(t, "phase_done", None, None);
        }
    }

    pub fn standalone_tune(&mut self, epochs: usize, t: f64) -> Result<&SideNetwork> {
        self.begin_standalone(epochs)?;
        while self.phase == Phase::Standalone {
            self.standalone_step(t)?;
        }
        Ok(&self.net)
    }

    /// Sample-weighted mean loss over the whole cache.
    pub fn cache_loss(&self) -> Result<f64> {
        cache_loss(&self.net, &self.cache)
    }
}

pub fn cache_loss(net: &SideNetwork, cache: &ActivationCache) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for r in cache.records() {
        let b = r.packet.batch();
        total += net.side_loss(&r.packet)? * b as f64;
        n += b;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Held-out data for one backbone type with its frozen outputs precomputed.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub backbone_id: String,
    pub logits: Tensor,
    pub blocks: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl EvalSet {
    pub fn build(backbone: &FrozenBackbone, taps: &[usize], samples: &[Sample]) -> Result<Self> {
        let (logits, blocks) = backbone.forward_with_taps(&token_batch(samples)?, taps)?;
        Ok(EvalSet {
            backbone_id: backbone.id().to_string(),
            logits,
            blocks,
            labels: samples.iter().map(|s| s.label as usize).collect(),
        })
    }

    /// Accuracy of the frozen backbone alone.
    pub fn backbone_accuracy(&self) -> f64 {
        accuracy(&crate::tensor::argmax_rows(&self.logits), &self.labels)
    }
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_backbone: BTreeMap<String, f64>,
    pub global: f64,
}

/// Corrected accuracy per backbone type and the sample-weighted global mean.
pub fn evaluate(net: &SideNetwork, sets: &[EvalSet]) -> Result<EvalReport> {
    let mut per_backbone = BTreeMap::new();
    let mut hits = 0.0;
    let mut n = 0usize;
    for s in sets {
        let pred = net.predict_from(&s.backbone_id, &s.logits, &s.blocks)?;
        let acc = accuracy(&pred, &s.labels);
        per_backbone.insert(s.backbone_id.clone(), acc);
        hits += acc * s.labels.len() as f64;
        n += s.labels.len();
    }
    Ok(EvalReport {
        per_backbone,
        global: if n == 0 { 0.0 } else { hits / n as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{make_plan, DSideRule};
    use crate::backbone::{build, BackboneConfig};
    use crate::client::process_batch;
    use crate::data::{LocalShard, SyntheticTask};
    use crate::seed;

    fn fixture(clients: usize, per_client: usize) -> (FrozenBackbone, SideNetwork, Vec<Vec<ActivationPacket>>) {
        let cfg = BackboneConfig::desk("m", 2, 16, 32, 4);
        let plan = make_plan(std::slice::from_ref(&cfg), DSideRule::Auto).unwrap();
        let bb = build(&cfg).unwrap();
        let task = SyntheticTask {
            vocab: 32,
            num_classes: 4,
            seq: 6,
            signal: 2.0,
            subset_size: 4,
            seed: 0,
        };
        let data = task.generate(clients * per_client).unwrap();
        let packets = (0..clients)
            .map(|c| {
                let mut shard = LocalShard::new(c as u32, data.samples[c * per_client..(c + 1) * per_client].to_vec());
                let mut out = Vec::new();
                while let Ok(p) = process_batch(&bb, &plan, &mut shard, 4) {
                    out.push(p);
                }
                out
            })
            .collect();
        let net = SideNetwork::new(&plan, 2, 1).unwrap();
        (bb, net, packets)
    }

    fn server(net: SideNetwork, clients: u32) -> Server {
        Server::new(
            net,
            ActivationCache::new(seed::rng(0, "cache")),
            TrainConfig::default(),
            0..clients,
            seed::rng(0, "replay"),
        )
    }

    #[test]
    fn one_packet_one_step() {
        let (_, net, packets) = fixture(1, 4);
        let mut s = server(net, 1);
        s.on_packet(packets[0][0].clone(), 0.0).unwrap();
        assert_eq!(s.arrival_steps, 1);
        assert_eq!(s.cache().len(), 1);
    }

    #[test]
    fn interleaved_arrivals_count_steps() {
        let (_, net, packets) = fixture(2, 8);
        let mut s = server(net, 2);
        for k in 0..2 {
            for c in 0..2 {
                s.on_packet(packets[c][k].clone(), (2 * k + c) as f64).unwrap();
            }
        }
        assert_eq!(s.arrival_steps, 4);
        let order: Vec<u32> = s.log.iter().filter_map(|e| e.client_id).collect();
        assert_eq!(order, vec![0, 1, 0, 1]);
    }

    #[test]
    fn arrival_step_lowers_packet_loss() {
        let (_, net, packets) = fixture(1, 4);
        let mut s = server(net, 1);
        let p = packets[0][0].clone();
        let before = s.net().side_loss(&p).unwrap();
        s.on_packet(p.clone(), 0.0).unwrap();
        assert!(s.net().side_loss(&p).unwrap() < before);
    }

    #[test]
    fn protocol_violations() {
        let (_, net, packets) = fixture(1, 8);
        let mut s = server(net, 1);
        s.on_packet(packets[0][0].clone(), 0.0).unwrap();
        let mut dup = packets[0][0].clone();
        dup.client_id = 5;
        assert!(matches!(s.on_packet(dup, 1.0), Err(Error::Protocol(_))));
        assert!(matches!(s.on_packet(packets[0][0].clone(), 1.0), Err(Error::Protocol(_))));
        s.end_of_data(0, 2.0).unwrap();
        assert_eq!(s.phase(), Phase::Standalone);
        assert!(matches!(s.on_packet(packets[0][1].clone(), 3.0), Err(Error::Phase(_))));
        assert_eq!(s.cache().len(), 1);
    }

    #[test]
    fn replay_budgets() {
        let (_, net, packets) = fixture(1, 8);
        let mut s = server(net, 1);
        assert_eq!(s.idle_replay(10, 0.0).unwrap(), 0);
        s.on_packet(packets[0][0].clone(), 0.0).unwrap();
        assert_eq!(s.idle_replay(10, 1.0).unwrap(), 10);
        assert_eq!(s.replay_steps, 10);
    }

    #[test]
    fn standalone_requires_phase_and_zero_epochs_is_noop() {
        let (_, net, packets) = fixture(1, 4);
        let mut s = server(net, 1);
        assert!(matches!(s.standalone_tune(1, 0.0), Err(Error::Phase(_))));
        s.on_packet(packets[0][0].clone(), 0.0).unwrap();
        s.end_of_data(0, 1.0).unwrap();
        let before = s.net().params().checksum();
        s.standalone_tune(0, 1.0).unwrap();
        assert_eq!(s.net().params().checksum(), before);
        assert_eq!(s.phase(), Phase::Done);
    }

    #[test]
    fn arrival_order_does_not_change_cached_multiset_or_standalone_result() {
        let (_, net, packets) = fixture(3, 8);
        let flat: Vec<ActivationPacket> = packets.into_iter().flatten().collect();
        let run = |order: &[usize]| {
            let mut cache = ActivationCache::new(seed::rng(0, "cache"));
            for &i in order {
                cache.insert(Arc::new(flat[i].clone()), 0.0).unwrap();
            }
            let mut s = Server::new(net.clone(), cache, TrainConfig::default(), [], seed::rng(0, "replay"));
            s.standalone_tune(2, 0.0).unwrap();
            let mut ids: Vec<(u32, u32)> = s.cache().samples().iter().map(|r| (r.client_id, r.sample_id)).collect();
            ids.sort_unstable();
            (ids, s.net().params().checksum())
        };
        let fwd: Vec<usize> = (0..flat.len()).collect();
        let rev: Vec<usize> = (0..flat.len()).rev().collect();
        assert_eq!(run(&fwd), run(&rev));
    }

    #[test]
    fn spill_round_trip() {
        let (_, net, packets) = fixture(1, 8);
        let dir = tempfile::tempdir().unwrap();
        let cache = ActivationCache::new(seed::rng(0, "cache")).with_spill(dir.path()).unwrap();
        let mut s = Server::new(net, cache, TrainConfig::default(), [0], seed::rng(0, "replay"));
        for (i, p) in packets[0].iter().enumerate() {
            s.on_packet(p.clone(), i as f64 * 0.5).unwrap();
        }
        let back = read_spill(&dir.path().join(SPILL_FILE)).unwrap();
        assert_eq!(back.len(), 2);
        for r in &back {
            let orig = s.cache().records().iter().find(|x| x.record_id == r.record_id).unwrap();
            assert_eq!(r, orig);
            assert_eq!(r.encode(), orig.encode());
        }
    }

    #[test]
    fn zero_net_eval_equals_backbone() {
        let (bb, net, _) = fixture(1, 4);
        let task = SyntheticTask {
            vocab: 32,
            num_classes: 4,
            seq: 6,
            signal: 2.0,
            subset_size: 4,
            seed: 5,
        };
        let d = task.generate(40).unwrap();
        let set = EvalSet::build(&bb, net.plan().taps("m").unwrap(), &d.samples).unwrap();
        let r = evaluate(&net, std::slice::from_ref(&set)).unwrap();
        assert_eq!(r.global, set.backbone_accuracy());
    }
}
