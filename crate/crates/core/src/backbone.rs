//! Frozen toy transformer backbones.
//!
//! Pre-norm encoder blocks with learned positional embeddings and a
//! mean-pool classification head. Parameters are drawn once from
//! `init_seed` and never change; the only entry points are forward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{self, Fnv, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub id: String,
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_ffn_mult() -> usize {
    4
}

impl BackboneConfig {
    /// Desk-scale config with the defaults used throughout the crate.
    pub fn desk(id: &str, num_layers: usize, hidden: usize, vocab: usize, num_classes: usize) -> Self {
        BackboneConfig {
            id: id.to_string(),
            num_layers,
            hidden,
            heads: 4,
            ffn_mult: 4,
            vocab,
            max_seq: 64,
            num_classes,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("backbone `{}`: {m}", self.id)));
        if self.id.is_empty() {
            return Err(Error::Config("backbone id must not be empty".into()));
        }
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if self.heads == 0 || self.hidden == 0 {
            return bad("hidden and heads must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.ffn_mult == 0 || self.max_seq == 0 {
            return bad("ffn_mult and max_seq must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes {} must be at least 2", self.num_classes));
        }
        if self.vocab < self.num_classes {
            return bad(format!(
                "vocab {} must be at least num_classes {}",
                self.vocab, self.num_classes
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Scalar parameter count.
    pub fn num_params(&self) -> usize {
        let h = self.hidden;
        let f = self.ffn_mult * h;
        let per_layer = 2 * h // ln1
            + 4 * (h * h + h) // q, k, v, o
            + 2 * h // ln2
            + h * f + f // ffn up
            + f * h + h; // ffn down
        self.vocab * h + self.max_seq * h + self.num_layers * per_layer + h * self.num_classes + self.num_classes
    }

    /// Analytic forward FLOPs.
    ///
    /// Matmuls count `2·m·k·n`. Every other kernel (embedding add, each
    /// layernorm, softmax, GELU, residual add, mean-pool) counts one FLOP per
    /// output element; bias adds are folded into their matmul.
    pub fn forward_flops(&self, seq: usize, batch: usize) -> f64 {
        let (s, h, a) = (seq as f64, self.hidden as f64, self.heads as f64);
        let f = self.ffn_mult as f64 * h;
        let embed = s * h;
        let matmuls = 3.0 * 2.0 * s * h * h // q, k, v
            + 2.0 * s * s * h // scores over all heads
            + 2.0 * s * s * h // probs x values
            + 2.0 * s * h * h // output projection
            + 2.0 * s * h * f // ffn up
            + 2.0 * s * f * h; // ffn down
        let elementwise = 2.0 * s * h // two layernorms
            + a * s * s // softmax
            + s * f // gelu
            + 2.0 * s * h; // residual adds
        let head = s * h + 2.0 * h * self.num_classes as f64;
        batch as f64 * (embed + self.num_layers as f64 * (matmuls + elementwise) + head)
    }

    /// Peak live activation elements for one forward of one sample: the
    /// working set of a single layer (residual, normed input, q/k/v,
    /// attention scores, context, FFN intermediate).
    pub fn live_activation_elems(&self, seq: usize) -> usize {
        let (s, h) = (seq, self.hidden);
        6 * s * h + self.heads * s * s + self.ffn_mult * s * h
    }
}

/// A flattened `[batch, seq]` block of token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<u32>,
}

impl TokenBatch {
    pub fn new(rows: &[&[u32]]) -> Result<Self> {
        let seq = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != seq) {
            return Err(Error::Dimension("token rows of unequal length".into()));
        }
        Ok(TokenBatch {
            batch: rows.len(),
            seq,
            ids: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }
}

#[derive(Clone, Debug)]
struct Layer {
    ln1_g: Tensor,
    ln1_b: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl Layer {
    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv,
            &self.wo, &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct FrozenBackbone {
    config: BackboneConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    layers: Vec<Layer>,
    head_w: Tensor,
    head_b: Tensor,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

fn ones(n: usize) -> Tensor {
    Tensor::from_fn(&[n], |_| 1.0)
}

/// Builds a backbone deterministically from `config.init_seed`.
pub fn build(config: &BackboneConfig) -> Result<FrozenBackbone> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let h = config.hidden;
    let f = config.ffn_mult * h;
    let tok_emb = normal(&mut rng, &[config.vocab, h], 1.0);
    let pos_emb = normal(&mut rng, &[config.max_seq, h], 1.0);
    let wstd = 1.0 / (h as f64).sqrt();
    let layers = (0..config.num_layers)
        .map(|_| Layer {
            ln1_g: ones(h),
            ln1_b: Tensor::zeros(&[h]),
            wq: normal(&mut rng, &[h, h], wstd),
            bq: Tensor::zeros(&[h]),
            wk: normal(&mut rng, &[h, h], wstd),
            bk: Tensor::zeros(&[h]),
            wv: normal(&mut rng, &[h, h], wstd),
            bv: Tensor::zeros(&[h]),
            wo: normal(&mut rng, &[h, h], wstd),
            bo: Tensor::zeros(&[h]),
            ln2_g: ones(h),
            ln2_b: Tensor::zeros(&[h]),
            w1: normal(&mut rng, &[h, f], wstd),
            b1: Tensor::zeros(&[f]),
            w2: normal(&mut rng, &[f, h], 1.0 / (f as f64).sqrt()),
            b2: Tensor::zeros(&[h]),
        })
        .collect();
    let head_w = normal(&mut rng, &[h, config.num_classes], wstd);
    let head_b = Tensor::zeros(&[config.num_classes]);
    Ok(FrozenBackbone {
        config: config.clone(),
        tok_emb,
        pos_emb,
        layers,
        head_w,
        head_b,
    })
}

impl FrozenBackbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn id(&self) -> &str {
        &self.config.id
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    /// Checksum over every parameter tensor.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_u64(self.tok_emb.checksum());
        h.write_u64(self.pos_emb.checksum());
        for l in &self.layers {
            for t in l.tensors() {
                h.write_u64(t.checksum());
            }
        }
        h.write_u64(self.head_w.checksum());
        h.write_u64(self.head_b.checksum());
        h.finish()
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.tok_emb.numel() + self.pos_emb.numel() + self.head_w.numel() + self.head_b.numel();
        for l in &self.layers {
            n += l.tensors().iter().map(|t| t.numel()).sum::<usize>();
        }
        n
    }

    pub fn forward_flops(&self, seq: usize, batch: usize) -> f64 {
        self.config.forward_flops(seq, batch)
    }

    /// Token plus positional embedding, `[batch, seq, hidden]`.
    pub fn embed(&self, tokens: &TokenBatch) -> Result<Tensor> {
        let (b, s, h) = (tokens.batch, tokens.seq, self.config.hidden);
        if s > self.config.max_seq {
            return Err(Error::Index(format!(
                "sequence length {s} exceeds max_seq {}",
                self.config.max_seq
            )));
        }
        if tokens.ids.len() != b * s {
            return Err(Error::Dimension(format!(
                "token batch holds {} ids, expected {}",
                tokens.ids.len(),
                b * s
            )));
        }
        let mut out = vec![0.0; b * s * h];
        for (pos, &id) in tokens.ids.iter().enumerate() {
            let id = id as usize;
            if id >= self.config.vocab {
                return Err(Error::Index(format!(
                    "token {id} out of range for vocab {}",
                    self.config.vocab
                )));
            }
            let t = pos % s;
            let e = &self.tok_emb.data()[id * h..(id + 1) * h];
            let p = &self.pos_emb.data()[t * h..(t + 1) * h];
            for j in 0..h {
                out[pos * h + j] = e[j] + p[j];
            }
        }
        Tensor::new(vec![b, s, h], out)
    }

    /// Applies transformer layer `layer` (1-based) to `[batch, seq, hidden]`.
    pub fn layer_forward(&self, layer: usize, x: &Tensor) -> Result<Tensor> {
        if layer == 0 || layer > self.config.num_layers {
            return Err(Error::Index(format!(
                "layer {layer} outside [1, {}]",
                self.config.num_layers
            )));
        }
        let l = &self.layers[layer - 1];
        let shape = x.shape().to_vec();
        let (b, s, h) = (shape[0], shape[1], shape[2]);
        let xf = x.reshape(&[b * s, h])?;

        let (a, _) = tensor::layernorm(&xf, &l.ln1_g, &l.ln1_b)?;
        let q = tensor::add_bias(&tensor::matmul(&a, &l.wq)?, &l.bq)?;
        let k = tensor::add_bias(&tensor::matmul(&a, &l.wk)?, &l.bk)?;
        let v = tensor::add_bias(&tensor::matmul(&a, &l.wv)?, &l.bv)?;
        let ctx = self.attention(&q, &k, &v, b, s)?;
        let o = tensor::add_bias(&tensor::matmul(&ctx, &l.wo)?, &l.bo)?;
        let x1 = tensor::add(&xf, &o)?;

        let (c, _) = tensor::layernorm(&x1, &l.ln2_g, &l.ln2_b)?;
        let u = tensor::gelu(&tensor::add_bias(&tensor::matmul(&c, &l.w1)?, &l.b1)?);
        let d = tensor::add_bias(&tensor::matmul(&u, &l.w2)?, &l.b2)?;
        let x2 = tensor::add(&x1, &d)?;
        x2.reshape(&[b, s, h])
    }

    /// Bidirectional multi-head attention over `[batch*seq, hidden]` q/k/v.
    fn attention(&self, q: &Tensor, k: &Tensor, v: &Tensor, b: usize, s: usize) -> Result<Tensor> {
        let h = self.config.hidden;
        let heads = self.config.heads;
        let dh = h / heads;
        tensor::record_matmul(b * heads, s, dh, s);
        tensor::record_matmul(b * heads, s, s, dh);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let blocks = parallel::map(b * heads, b * heads * s * s * dh, |bh| {
            let (i, hd) = (bh / heads, bh % heads);
            let col = |row: &[f64]| -> Vec<f64> { row[hd * dh..(hd + 1) * dh].to_vec() };
            let mut qs = Vec::with_capacity(s * dh);
            let mut kt = vec![0.0; dh * s];
            let mut vs = Vec::with_capacity(s * dh);
            for t in 0..s {
                let r = (i * s + t) * h;
                qs.extend(col(&qd[r..r + h]));
                vs.extend(col(&vd[r..r + h]));
                for (j, kv) in kd[r + hd * dh..r + (hd + 1) * dh].iter().enumerate() {
                    kt[j * s + t] = *kv;
                }
            }
            let mut scores = vec![0.0; s * s];
            tensor::matmul_slices(&qs, &kt, &mut scores, s, dh, s);
            let mut probs = vec![0.0; s * s];
            for (row, out) in scores.chunks(s).zip(probs.chunks_mut(s)) {
                let scaled: Vec<f64> = row.iter().map(|x| x * scale).collect();
                tensor::softmax_into(&scaled, out);
            }
            let mut ctx = vec![0.0; s * dh];
            tensor::matmul_slices(&probs, &vs, &mut ctx, s, s, dh);
            ctx
        });
        let mut out = vec![0.0; b * s * h];
        for (bh, ctx) in blocks.iter().enumerate() {
            let (i, hd) = (bh / heads, bh % heads);
            for t in 0..s {
                let dst = (i * s + t) * h + hd * dh;
                out[dst..dst + dh].copy_from_slice(&ctx[t * dh..(t + 1) * dh]);
            }
        }
        Tensor::new(vec![b * s, h], out)
    }

    /// Classification head: mean-pool over the sequence, then linear.
    pub fn head(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = tensor::mean_pool_seq(x)?;
        tensor::add_bias(&tensor::matmul(&pooled, &self.head_w)?, &self.head_b)
    }

    /// Logits plus the post-layer activation of each tapped layer (1-based,
    /// strictly increasing), in tap order. No gradient state is created.
    pub fn forward_with_taps(&self, tokens: &TokenBatch, tap_layers: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
        let l = self.config.num_layers;
        for (i, &t) in tap_layers.iter().enumerate() {
            if t == 0 || t > l {
                return Err(Error::Index(format!("tap layer {t} outside [1, {l}]")));
            }
            if i > 0 && tap_layers[i - 1] >= t {
                return Err(Error::Index(format!(
                    "tap layers must be strictly increasing: {tap_layers:?}"
                )));
            }
        }
        let mut x = self.embed(tokens)?;
        let mut taps = Vec::with_capacity(tap_layers.len());
        let mut next = tap_layers.iter().peekable();
        for layer in 1..=l {
            x = self.layer_forward(layer, &x)?;
            if next.peek() == Some(&&layer) {
                taps.push(x.clone());
                next.next();
            }
        }
        let logits = self.head(&x)?;
        Ok((logits, taps))
    }

    pub fn logits(&self, tokens: &TokenBatch) -> Result<Tensor> {
        Ok(self.forward_with_taps(tokens, &[])?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens(batch: usize, seq: usize, vocab: usize) -> TokenBatch {
        TokenBatch {
            batch,
            seq,
            ids: (0..batch * seq).map(|i| ((i * 7 + 3) % vocab) as u32).collect(),
        }
    }

    #[test]
    fn desk_family_builds_and_runs() {
        for (l, h) in [(4, 32), (8, 64), (12, 128)] {
            let cfg = BackboneConfig::desk("b", l, h, 64, 4);
            let b = build(&cfg).unwrap();
            let taps: Vec<usize> = (1..=l).collect();
            let (logits, t) = b.forward_with_taps(&tokens(2, 8, 64), &taps).unwrap();
            assert_eq!(logits.shape(), &[2, 4]);
            assert_eq!(t.len(), l);
            assert!(t.iter().all(|x| x.shape() == [2, 8, h]));
            assert_eq!(b.param_count(), cfg.num_params());
        }
    }

    #[test]
    fn same_seed_same_checksum() {
        let cfg = BackboneConfig::desk("b", 4, 32, 64, 4);
        assert_eq!(build(&cfg).unwrap().checksum(), build(&cfg).unwrap().checksum());
        let other = BackboneConfig { init_seed: 1, ..cfg };
        assert_ne!(build(&other).unwrap().checksum(), build(&BackboneConfig::desk("b", 4, 32, 64, 4)).unwrap().checksum());
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let cfg = BackboneConfig { hidden: 30, heads: 4, ..BackboneConfig::desk("b", 2, 32, 64, 4) };
        assert!(matches!(build(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn last_tap_is_pre_head_state() {
        let cfg = BackboneConfig::desk("b", 3, 32, 64, 4);
        let b = build(&cfg).unwrap();
        let tb = tokens(2, 5, 64);
        let (logits, taps) = b.forward_with_taps(&tb, &[3]).unwrap();
        assert_eq!(b.head(&taps[0]).unwrap(), logits);
    }

    #[test]
    fn taps_match_layer_by_layer_reexecution() {
        let cfg = BackboneConfig::desk("b", 8, 64, 64, 4);
        let b = build(&cfg).unwrap();
        let tb = tokens(3, 6, 64);
        let tap_layers = [2, 5, 8];
        let (_, taps) = b.forward_with_taps(&tb, &tap_layers).unwrap();
        let mut x = b.embed(&tb).unwrap();
        let mut recorded = Vec::new();
        for layer in 1..=8 {
            x = b.layer_forward(layer, &x).unwrap();
            recorded.push(x.clone());
        }
        for (t, &l) in taps.iter().zip(&tap_layers) {
            assert_eq!(t, &recorded[l - 1]);
        }
    }

    #[test]
    fn tap_shape_for_batch8_seq32() {
        let cfg = BackboneConfig::desk("b", 8, 64, 64, 4);
        let b = build(&cfg).unwrap();
        let (_, taps) = b.forward_with_taps(&tokens(8, 32, 64), &[4, 8]).unwrap();
        assert!(taps.iter().all(|t| t.shape() == [8, 32, 64]));
    }

    #[test]
    fn bad_taps_are_index_errors() {
        let b = build(&BackboneConfig::desk("b", 4, 32, 64, 4)).unwrap();
        let tb = tokens(1, 4, 64);
        assert!(matches!(b.forward_with_taps(&tb, &[0]), Err(Error::Index(_))));
        assert!(matches!(b.forward_with_taps(&tb, &[5]), Err(Error::Index(_))));
        assert!(matches!(b.forward_with_taps(&tb, &[3, 2]), Err(Error::Index(_))));
        let long = tokens(1, 65, 64);
        assert!(matches!(b.forward_with_taps(&long, &[4]), Err(Error::Index(_))));
    }

    #[test]
    fn flops_linear_in_batch_and_monotone_in_depth() {
        let cfg = BackboneConfig::desk("b", 8, 64, 64, 4);
        assert_eq!(cfg.forward_flops(32, 2), 2.0 * cfg.forward_flops(32, 1));
        let mut prev = 0.0;
        for l in 1..10 {
            let f = BackboneConfig::desk("b", l, 64, 64, 4).forward_flops(32, 1);
            assert!(f > prev);
            prev = f;
        }
    }

    #[test]
    fn analytic_flops_within_one_percent_of_traced_matmuls() {
        let cfg = BackboneConfig::desk("b", 8, 64, 64, 4);
        let b = build(&cfg).unwrap();
        let tb = tokens(1, 32, 64);
        let (_, traced) = tensor::trace_matmul_flops(|| b.forward_with_taps(&tb, &[8]).unwrap());
        let analytic = cfg.forward_flops(32, 1);
        let rel = (analytic - traced as f64).abs() / traced as f64;
        assert!(rel < 0.01, "analytic {analytic} traced {traced} rel {rel}");
    }
}
