//! The server-side trainable network: a projection per backbone type, a
//! ladder of shared low-rank adapters with gated fusion, and a head that
//! outputs a probability-space correction.
//!
//! Adapter `j` maps a projected tap through `down`, GELU, mean-pool over the
//! sequence, then `up`. Pooling is moved ahead of `up` because `up`, the gate
//! mix and the head are all linear, so the result equals pooling at the end;
//! likewise the projection and `down` are folded into one `[hidden, rank]`
//! matrix before touching the activations.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::alignment::AlignmentPlan;
use crate::autograd::{Graph, Var};
use crate::backbone::{FrozenBackbone, TokenBatch};
use crate::error::{Error, Result};
use crate::optim::{adamw_step, AdamW, ParamGroup};
use crate::tensor::{self, Tensor};
use crate::wire::{ActivationPacket, Cursor};

pub fn proj_w(backbone_id: &str) -> String {
    format!("proj.{backbone_id}.w")
}

pub fn proj_b(backbone_id: &str) -> String {
    format!("proj.{backbone_id}.b")
}

fn adapter(j: usize, part: &str) -> String {
    format!("adapter.{j:02}.{part}")
}

const HEAD_W: &str = "head.w";
const HEAD_B: &str = "head.b";

/// `softmax(logits) - onehot(labels)`.
pub fn compute_deviation(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (rows, c) = logits.rows_cols();
    if labels.len() != rows {
        return Err(Error::Dimension(format!(
            "{} labels for {rows} logit rows",
            labels.len()
        )));
    }
    let mut d = tensor::softmax(logits).into_data();
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::Data(format!("label {l} out of range for {c} classes")));
        }
        d[i * c + l] -= 1.0;
    }
    Tensor::new(vec![rows, c], d)
}

/// Mean over rows of `||s + Δy||²`.
pub fn residual_loss(correction: &Tensor, deviation: &Tensor) -> Result<f64> {
    if correction.shape() != deviation.shape() {
        return Err(Error::Dimension(format!(
            "correction {:?} vs deviation {:?}",
            correction.shape(),
            deviation.shape()
        )));
    }
    let (rows, _) = deviation.rows_cols();
    let sq: f64 = correction
        .data()
        .iter()
        .zip(deviation.data())
        .map(|(s, d)| (s + d) * (s + d))
        .sum();
    Ok(sq / rows.max(1) as f64)
}

/// `argmax(softmax(logits) + correction)` per row.
pub fn corrected_argmax(logits: &Tensor, correction: &Tensor) -> Result<Vec<usize>> {
    let p = tensor::softmax(logits);
    Ok(tensor::argmax_rows(&tensor::add(&p, correction)?))
}

/// One backbone's contribution to a loss: taps and deviations for a batch.
#[derive(Clone, Debug)]
pub struct SideInput<'a> {
    pub backbone_id: &'a str,
    pub blocks: &'a [Tensor],
    pub deviation: &'a Tensor,
}

impl<'a> From<&'a ActivationPacket> for SideInput<'a> {
    fn from(p: &'a ActivationPacket) -> Self {
        SideInput {
            backbone_id: &p.backbone_id,
            blocks: &p.blocks,
            deviation: &p.deviation,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SideNetwork {
    plan: AlignmentPlan,
    rank: usize,
    params: ParamGroup,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

impl SideNetwork {
    pub fn new(plan: &AlignmentPlan, rank: usize, seed: u64) -> Result<Self> {
        let d = plan.d_side;
        if rank == 0 || rank > d {
            return Err(Error::Config(format!("rank {rank} outside [1, d_side={d}]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamGroup::new();
        for (id, &(h, _)) in &plan.projection_shapes {
            params.insert(proj_w(id), normal(&mut rng, &[h, d], 1.0 / (h as f64).sqrt()))?;
            params.insert(proj_b(id), Tensor::zeros(&[d]))?;
        }
        for j in 1..=plan.block_count {
            params.insert(adapter(j, "down"), normal(&mut rng, &[d, rank], 1.0 / (d as f64).sqrt()))?;
            params.insert(adapter(j, "down_b"), Tensor::zeros(&[rank]))?;
            params.insert(adapter(j, "up"), Tensor::zeros(&[rank, d]))?;
            params.insert(adapter(j, "up_b"), Tensor::zeros(&[d]))?;
            params.insert(adapter(j, "alpha"), Tensor::zeros(&[1]))?;
        }
        params.insert(HEAD_W, normal(&mut rng, &[d, plan.num_classes], 1.0 / (d as f64).sqrt()))?;
        params.insert(HEAD_B, Tensor::zeros(&[plan.num_classes]))?;
        Ok(SideNetwork {
            plan: plan.clone(),
            rank,
            params,
        })
    }

    pub fn plan(&self) -> &AlignmentPlan {
        &self.plan
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn params(&self) -> &ParamGroup {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamGroup {
        &mut self.params
    }

    pub fn steps(&self) -> u64 {
        self.params.steps()
    }

    pub fn has_projection(&self, backbone_id: &str) -> bool {
        self.params.contains(&proj_w(backbone_id))
    }

    /// Names of the parameters shared by every backbone type.
    pub fn shared_param_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| !n.starts_with("proj."))
            .map(str::to_string)
            .collect()
    }

    /// Copy holding only `backbone_id`'s projection plus the shared state,
    /// i.e. what a device downloads for local inference.
    pub fn for_device(&self, backbone_id: &str) -> Result<SideNetwork> {
        if !self.has_projection(backbone_id) {
            return Err(Error::Identity(backbone_id.to_string()));
        }
        let mut out = self.clone();
        let others: Vec<String> = self
            .params
            .names()
            .filter(|n| n.starts_with("proj.") && *n != proj_w(backbone_id) && *n != proj_b(backbone_id))
            .map(str::to_string)
            .collect();
        for n in others {
            out.params.remove(&n);
        }
        Ok(out)
    }

    /// Analytic FLOPs of one forward over `batch` samples of one backbone.
    pub fn forward_flops(&self, batch: usize, seq: usize, hidden: usize) -> f64 {
        let (b, s, h) = (batch as f64, seq as f64, hidden as f64);
        let (d, r, c) = (self.plan.d_side as f64, self.rank as f64, self.plan.num_classes as f64);
        let per_block = 2.0 * h * d * r // fold projection into down
            + 2.0 * d * r // fold projection bias
            + 2.0 * b * s * h * r // activations x folded matrix
            + 2.0 * b * s * r // bias + gelu
            + b * s * r // pool
            + 2.0 * b * r * d // up
            + 4.0 * b * d; // gate mix
        self.plan.block_count as f64 * per_block + 2.0 * b * d * c
    }

    /// Forward plus backward, costed at three forwards.
    pub fn step_flops(&self, batch: usize, seq: usize, hidden: usize) -> f64 {
        3.0 * self.forward_flops(batch, seq, hidden)
    }

    fn check_blocks(&self, backbone_id: &str, blocks: &[Tensor]) -> Result<(usize, usize, usize)> {
        let h = self.plan.hidden(backbone_id)?;
        if !self.has_projection(backbone_id) {
            return Err(Error::Identity(backbone_id.to_string()));
        }
        if blocks.len() != self.plan.block_count {
            return Err(Error::Dimension(format!(
                "{} taps for a {}-block plan",
                blocks.len(),
                self.plan.block_count
            )));
        }
        let shape = blocks[0].shape();
        if shape.len() != 3 || shape[2] != h || blocks.iter().any(|b| b.shape() != shape) {
            return Err(Error::Dimension(format!(
                "taps for `{backbone_id}` must be [batch, seq, {h}], got {shape:?}"
            )));
        }
        Ok((shape[0], shape[1], h))
    }

    /// Builds the correction `[batch, classes]` for one backbone's taps.
    fn build_forward(&self, g: &mut Graph, params: &ParamGroup, backbone_id: &str, blocks: &[Tensor], train: bool) -> Result<Var> {
        let (b, s, h) = self.check_blocks(backbone_id, blocks)?;
        let d = self.plan.d_side;
        let r = self.rank;
        let p = |g: &mut Graph, name: &str| {
            if train {
                g.param(name, params)
            } else {
                g.param_frozen(name, params)
            }
        };
        let wp = p(g, &proj_w(backbone_id))?;
        let bp = p(g, &proj_b(backbone_id))?;
        let bp_row = g.reshape(bp, &[1, d])?;
        let mut state: Option<Var> = None;
        for (j, tap) in (1..=self.plan.block_count).zip(blocks) {
            let down = p(g, &adapter(j, "down"))?;
            let down_b = p(g, &adapter(j, "down_b"))?;
            let up = p(g, &adapter(j, "up"))?;
            let up_b = p(g, &adapter(j, "up_b"))?;
            let alpha = p(g, &adapter(j, "alpha"))?;

            let folded = g.matmul(wp, down)?;
            let c = g.matmul(bp_row, down)?;
            let c = g.reshape(c, &[r])?;
            let c = g.add(c, down_b)?;
            let x = g.input(tap.reshape(&[b * s, h])?);
            let z = g.matmul(x, folded)?;
            let z = g.add_bias(z, c)?;
            let z = g.gelu(z);
            let z = g.reshape(z, &[b, s, r])?;
            let pooled = g.mean_pool_seq(z)?;
            let u = g.matmul(pooled, up)?;
            let u = g.add_bias(u, up_b)?;

            let gate = g.sigmoid(alpha);
            let mixed_new = g.mul_scalar(u, gate)?;
            state = Some(match state {
                None => mixed_new,
                Some(prev) => {
                    let keep = g.one_minus(gate);
                    let kept = g.mul_scalar(prev, keep)?;
                    g.add(kept, mixed_new)?
                }
            });
        }
        let state = state.expect("plan has at least one block");
        let hw = p(g, HEAD_W)?;
        let hb = p(g, HEAD_B)?;
        let out = g.matmul(state, hw)?;
        g.add_bias(out, hb)
    }

    /// Size-weighted residual loss over one or more backbone groups.
    pub fn build_loss(&self, g: &mut Graph, params: &ParamGroup, inputs: &[SideInput<'_>]) -> Result<Var> {
        let total: usize = inputs.iter().map(|i| i.deviation.shape()[0]).sum();
        if total == 0 {
            return Err(Error::Dimension("loss over an empty batch".into()));
        }
        let mut loss: Option<Var> = None;
        for inp in inputs {
            let s = self.build_forward(g, params, inp.backbone_id, inp.blocks, true)?;
            let target = tensor::scale(inp.deviation, -1.0);
            let l = g.mse(s, &target)?;
            let n = inp.deviation.shape()[0];
            let l = if inputs.len() == 1 {
                l
            } else {
                g.scale(l, n as f64 / total as f64)
            };
            loss = Some(match loss {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
        Ok(loss.expect("non-empty inputs"))
    }

    /// Correction `s` for one backbone's taps; no gradient state is kept.
    pub fn side_forward(&self, backbone_id: &str, blocks: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = self.build_forward(&mut g, &self.params, backbone_id, blocks, false)?;
        Ok(g.value(v).clone())
    }

    pub fn side_loss(&self, packet: &ActivationPacket) -> Result<f64> {
        self.loss(&[SideInput::from(packet)])
    }

    pub fn loss(&self, inputs: &[SideInput<'_>]) -> Result<f64> {
        let mut g = Graph::new();
        let v = self.build_loss(&mut g, &self.params, inputs)?;
        let x = g.value(v).data()[0];
        if !x.is_finite() {
            return Err(Error::Numeric(format!("non-finite side loss {x}")));
        }
        Ok(x)
    }

    /// One optimizer step; returns the loss before the update.
    pub fn train_step(&mut self, inputs: &[SideInput<'_>], opt: &AdamW) -> Result<f64> {
        let mut g = Graph::new();
        let v = self.build_loss(&mut g, &self.params, inputs)?;
        let loss = g.value(v).data()[0];
        g.backward(v, &mut self.params)?;
        adamw_step(&mut self.params, opt)?;
        Ok(loss)
    }

    /// Predictions from backbone logits plus this backbone's taps.
    pub fn predict_from(&self, backbone_id: &str, logits: &Tensor, blocks: &[Tensor]) -> Result<Vec<usize>> {
        let s = self.side_forward(backbone_id, blocks)?;
        corrected_argmax(logits, &s)
    }

    /// Runs the frozen backbone with this plan's taps, then corrects.
    pub fn corrected_predict(&self, backbone: &FrozenBackbone, tokens: &TokenBatch) -> Result<Vec<usize>> {
        if !self.has_projection(backbone.id()) {
            return Err(Error::Identity(backbone.id().to_string()));
        }
        let taps = self.plan.taps(backbone.id())?;
        let (logits, blocks) = backbone.forward_with_taps(tokens, taps)?;
        self.predict_from(backbone.id(), &logits, &blocks)
    }
}

const CKPT_MAGIC: &[u8; 4] = b"FMSN";
const CKPT_VERSION: u16 = 1;

/// Little-endian: magic, version u16, plan digest (32 bytes), metadata
/// (u32 length + UTF-8), rank u32, blob count u32, then per parameter
/// name (u16 length + UTF-8), ndim u16, dims u32 each, f64 values.
pub fn write_checkpoint<W: Write>(w: &mut W, net: &SideNetwork, metadata: &str) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&net.plan.digest());
    out.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
    out.extend_from_slice(metadata.as_bytes());
    out.extend_from_slice(&(net.rank as u32).to_le_bytes());
    out.extend_from_slice(&(net.params.len() as u32).to_le_bytes());
    for (name, t) in net.params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u16).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&out)?;
    Ok(())
}

/// Restores a network saved under `plan`; returns it with its metadata.
pub fn read_checkpoint(bytes: &[u8], plan: &AlignmentPlan) -> Result<(SideNetwork, String)> {
    let mut c = Cursor::new(bytes);
    if c.take(4)? != CKPT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = c.u16()?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    if c.take(32)? != plan.digest() {
        return Err(Error::Format("checkpoint was saved under a different plan".into()));
    }
    let meta_len = c.u32()? as usize;
    let metadata = String::from_utf8(c.take(meta_len)?.to_vec())
        .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
    let rank = c.u32()? as usize;
    let mut net = SideNetwork::new(plan, rank, 0)?;
    let count = c.u32()? as usize;
    if count != net.params.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, plan expects {}",
            net.params.len()
        )));
    }
    for _ in 0..count {
        let n = c.u16()? as usize;
        let name = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| Error::Format("bad tensor name".into()))?;
        let ndim = c.u16()? as usize;
        let shape = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        let expected = net
            .params
            .get(&name)
            .ok_or_else(|| Error::Format(format!("unexpected tensor `{name}`")))?;
        if expected.shape() != shape.as_slice() {
            return Err(Error::Format(format!("tensor `{name}` has shape {shape:?}")));
        }
        net.params.set_data(&name, &data)?;
    }
    c.finish()?;
    Ok((net, metadata))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{make_plan, DSideRule};
    use crate::backbone::BackboneConfig;
    use crate::gradcheck::grad_check;
    use rand::Rng;

    fn plan() -> AlignmentPlan {
        make_plan(
            &[BackboneConfig::desk("a", 2, 8, 16, 3), BackboneConfig::desk("b", 3, 12, 16, 3)],
            DSideRule::Explicit(6),
        )
        .unwrap()
    }

    fn random_blocks(rng: &mut ChaCha8Rng, b: usize, s: usize, h: usize, n: usize) -> Vec<Tensor> {
        (0..n)
            .map(|_| Tensor::from_fn(&[b, s, h], |_| rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn random_dev(rng: &mut ChaCha8Rng, b: usize, c: usize) -> Tensor {
        let logits = Tensor::from_fn(&[b, c], |_| rng.random_range(-2.0..2.0));
        let labels: Vec<usize> = (0..b).map(|i| i % c).collect();
        compute_deviation(&logits, &labels).unwrap()
    }

    /// Perturbs every parameter so that no gradient path is trivially zero.
    fn jitter(net: &mut SideNetwork, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = net.params.names().map(str::to_string).collect();
        for n in names {
            let data: Vec<f64> = net.params.get(&n).unwrap().data().iter().map(|x| x + rng.random_range(-0.3..0.3)).collect();
            net.params.set_data(&n, &data).unwrap();
        }
    }

    #[test]
    fn deviation_examples() {
        let d = compute_deviation(&Tensor::new(vec![1, 2], vec![0.3, 0.3]).unwrap(), &[1]).unwrap();
        assert_eq!(d.data(), &[0.5, -0.5]);
        let d = compute_deviation(&Tensor::new(vec![1, 3], vec![30.0, 0.0, 0.0]).unwrap(), &[0]).unwrap();
        assert!(d.data().iter().all(|x| x.abs() < 1e-6));
        assert!(matches!(
            compute_deviation(&Tensor::zeros(&[1, 2]), &[2]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn deviation_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::from_fn(&[6, 4], |_| rng.random_range(-5.0..5.0));
        let labels = [0, 1, 2, 3, 1, 2];
        let d = compute_deviation(&logits, &labels).unwrap();
        for i in 0..6 {
            let row = &logits.data()[i * 4..(i + 1) * 4];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            let mut sum = 0.0;
            for k in 0..4 {
                let want = row[k].exp() / z - if k == labels[i] { 1.0 } else { 0.0 };
                let got = d.data()[i * 4 + k];
                assert!((want - got).abs() < 1e-12);
                assert!((-1.0..=1.0).contains(&got));
                sum += got;
            }
            assert!(sum.abs() < 1e-12);
        }
    }

    #[test]
    fn residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = Tensor::from_fn(&[5, 3], |_| rng.random_range(-3.0..3.0));
        let labels = [2, 0, 1, 1, 0];
        let dev = compute_deviation(&logits, &labels).unwrap();
        let s = tensor::scale(&dev, -1.0);
        assert_eq!(residual_loss(&s, &dev).unwrap(), 0.0);
        assert_eq!(corrected_argmax(&logits, &s).unwrap(), labels.to_vec());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = plan();
        let net = SideNetwork::new(&p, 2, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (id, h) in [("a", 8), ("b", 12)] {
            let blocks = random_blocks(&mut rng, 3, 4, h, 2);
            let s = net.side_forward(id, &blocks).unwrap();
            assert_eq!(s.shape(), &[3, 3]);
            assert!(s.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn zero_net_loss_is_mean_squared_deviation() {
        let net = SideNetwork::new(&plan(), 2, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let blocks = random_blocks(&mut rng, 4, 3, 8, 2);
        let dev = random_dev(&mut rng, 4, 3);
        let p = ActivationPacket::new(0, "a", vec![0, 1, 2, 3], &blocks, &dev).unwrap();
        let want: f64 = p.deviation.data().iter().map(|x| x * x).sum::<f64>() / 4.0;
        assert!((net.side_loss(&p).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn unknown_backbone_is_identity_error() {
        let net = SideNetwork::new(&plan(), 2, 0).unwrap();
        let blocks = vec![Tensor::zeros(&[1, 1, 8]); 2];
        assert!(matches!(net.side_forward("zzz", &blocks), Err(Error::Identity(_))));
        let dev = net.for_device("a").unwrap();
        assert!(matches!(dev.side_forward("b", &vec![Tensor::zeros(&[1, 1, 12]); 2]), Err(Error::Identity(_))));
    }

    #[test]
    fn rank_bounds() {
        assert!(SideNetwork::new(&plan(), 0, 0).is_err());
        assert!(SideNetwork::new(&plan(), 7, 0).is_err());
        assert!(SideNetwork::new(&plan(), 6, 0).is_ok());
    }

    #[test]
    fn factorized_forward_matches_per_token_oracle() {
        let mut net = SideNetwork::new(&plan(), 3, 4).unwrap();
        jitter(&mut net, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (b, s, h) = (2, 5, 12);
        let blocks = random_blocks(&mut rng, b, s, h, 2);
        let got = net.side_forward("b", &blocks).unwrap();

        let p = &net.params;
        let get = |n: &str| p.get(n).unwrap().clone();
        let mut state = Tensor::zeros(&[b, 6]);
        for (j, tap) in (1..=2).zip(&blocks) {
            let x = tap.reshape(&[b * s, h]).unwrap();
            let proj = tensor::add_bias(&tensor::matmul(&x, &get("proj.b.w")).unwrap(), &get("proj.b.b")).unwrap();
            let z = tensor::add_bias(&tensor::matmul(&proj, &get(&adapter(j, "down"))).unwrap(), &get(&adapter(j, "down_b"))).unwrap();
            let a = tensor::gelu(&z);
            let u = tensor::add_bias(&tensor::matmul(&a, &get(&adapter(j, "up"))).unwrap(), &get(&adapter(j, "up_b"))).unwrap();
            let pooled = tensor::mean_pool_seq(&u.reshape(&[b, s, 6]).unwrap()).unwrap();
            let gate = tensor::sigmoid_scalar(get(&adapter(j, "alpha")).data()[0]);
            state = tensor::add(&tensor::scale(&state, 1.0 - gate), &tensor::scale(&pooled, gate)).unwrap();
        }
        let want = tensor::add_bias(&tensor::matmul(&state, &get(HEAD_W)).unwrap(), &get(HEAD_B)).unwrap();
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let mut net = SideNetwork::new(&plan(), 2, 4).unwrap();
        jitter(&mut net, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let blocks_a = random_blocks(&mut rng, 2, 3, 8, 2);
        let dev_a = random_dev(&mut rng, 2, 3);
        let blocks_b = random_blocks(&mut rng, 3, 3, 12, 2);
        let dev_b = random_dev(&mut rng, 3, 3);
        let inputs = [
            SideInput { backbone_id: "a", blocks: &blocks_a, deviation: &dev_a },
            SideInput { backbone_id: "b", blocks: &blocks_b, deviation: &dev_b },
        ];
        let err = grad_check(net.params(), 1e-5, |g, p| net.build_loss(g, p, &inputs)).unwrap();
        assert!(err < 1e-5, "max rel error {err}");
    }

    #[test]
    fn step_updates_own_projection_and_shared_state_only() {
        let mut net = SideNetwork::new(&plan(), 2, 4).unwrap();
        jitter(&mut net, 3);
        let before = net.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let blocks = random_blocks(&mut rng, 2, 3, 8, 2);
        let dev = random_dev(&mut rng, 2, 3);
        net.train_step(&[SideInput { backbone_id: "a", blocks: &blocks, deviation: &dev }], &AdamW::default())
            .unwrap();
        let changed = |n: &str| net.params.get(n).unwrap() != before.params.get(n).unwrap();
        assert!(changed("proj.a.w"));
        for n in net.shared_param_names() {
            assert!(changed(&n), "{n} unchanged");
        }
        assert!(!changed("proj.b.w") && !changed("proj.b.b"));
    }

    #[test]
    fn device_copy_predicts_identically() {
        let mut net = SideNetwork::new(&plan(), 2, 4).unwrap();
        jitter(&mut net, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let blocks = random_blocks(&mut rng, 3, 2, 8, 2);
        let logits = Tensor::from_fn(&[3, 3], |_| rng.random_range(-1.0..1.0));
        let full = net.side_forward("a", &blocks).unwrap();
        let dev = net.for_device("a").unwrap();
        assert_eq!(dev.side_forward("a", &blocks).unwrap(), full);
        assert_eq!(dev.predict_from("a", &logits, &blocks).unwrap(), net.predict_from("a", &logits, &blocks).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut net = SideNetwork::new(&plan(), 2, 4).unwrap();
        jitter(&mut net, 7);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &net, "{\"seed\":1}").unwrap();
        let (back, meta) = read_checkpoint(&buf, &plan()).unwrap();
        assert_eq!(meta, "{\"seed\":1}");
        assert_eq!(back.params().checksum(), net.params().checksum());
        let other = make_plan(&[BackboneConfig::desk("a", 2, 8, 16, 3)], DSideRule::Explicit(6)).unwrap();
        assert!(matches!(read_checkpoint(&buf, &other), Err(Error::Format(_))));
    }

    #[test]
    fn trained_correction_depends_on_every_tap() {
        let plan = plan();
        let mut net = SideNetwork::new(&plan, 3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let blocks = random_blocks(&mut rng, 6, 5, 8, plan.block_count);
        let deviation = random_dev(&mut rng, 6, 3);
        let input = SideInput {
            backbone_id: "a",
            blocks: &blocks,
            deviation: &deviation,
        };
        let opt = AdamW::with_lr(1e-2);
        for _ in 0..50 {
            net.train_step(std::slice::from_ref(&input), &opt).unwrap();
        }
        let base = net.side_forward("a", &blocks).unwrap();
        for j in 0..plan.block_count {
            let mut probe = blocks.clone();
            probe[j] = Tensor::zeros(blocks[j].shape());
            let out = net.side_forward("a", &probe).unwrap();
            let diff = base.data().iter().zip(out.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff > 1e-6, "tap {j}: max change {diff}");
        }
    }
}
