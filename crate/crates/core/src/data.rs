//! Synthetic classification task and Dirichlet label-skew partitioning.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bounded redraws when a Dirichlet split leaves a client empty.
pub const PARTITION_RETRIES: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: u32,
    pub tokens: Vec<u32>,
    pub label: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub vocab: usize,
    pub num_classes: usize,
    pub seq: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        histogram(&self.samples, self.num_classes)
    }
}

pub fn histogram(samples: &[Sample], num_classes: usize) -> Vec<usize> {
    let mut h = vec![0; num_classes];
    for s in samples {
        h[s.label as usize] += 1;
    }
    h
}

/// Each class raises the weight of its own disjoint block of `subset_size`
/// tokens by `exp(signal)`; every other token keeps weight 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub vocab: usize,
    pub num_classes: usize,
    pub seq: usize,
    pub signal: f64,
    pub subset_size: usize,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.seq == 0 || self.subset_size == 0 {
            return Err(Error::Config(
                "task needs num_classes >= 2, seq >= 1 and subset_size >= 1".into(),
            ));
        }
        if self.num_classes * self.subset_size > self.vocab {
            return Err(Error::Config(format!(
                "{} classes x {} signal tokens exceed vocab {}",
                self.num_classes, self.subset_size, self.vocab
            )));
        }
        if !self.signal.is_finite() || self.signal < 0.0 {
            return Err(Error::Config(format!("signal {} must be finite and >= 0", self.signal)));
        }
        Ok(())
    }

    fn subset(&self, class: usize) -> std::ops::Range<usize> {
        class * self.subset_size..(class + 1) * self.subset_size
    }

    /// Token probabilities under class `c`.
    pub fn token_probs(&self, class: usize) -> Vec<f64> {
        let boost = self.signal.exp();
        let mut w = vec![1.0; self.vocab];
        for t in self.subset(class) {
            w[t] = boost;
        }
        let z: f64 = w.iter().sum();
        w.iter().map(|x| x / z).collect()
    }

    /// Maximum-likelihood class under uniform priors (ties to the lowest class).
    pub fn bayes_predict(&self, tokens: &[u32]) -> usize {
        let mut counts = vec![0usize; self.num_classes];
        for &t in tokens {
            let t = t as usize;
            if t < self.num_classes * self.subset_size {
                counts[t / self.subset_size] += 1;
            }
        }
        // Log-likelihoods differ only through signal-token counts.
        let mut best = 0;
        for c in 1..self.num_classes {
            if counts[c] > counts[best] {
                best = c;
            }
        }
        best
    }

    /// `n` iid samples with uniform labels; ids are `0..n`.
    pub fn generate(&self, n: usize) -> Result<Dataset> {
        self.generate_with_ids(n, 0, self.seed)
    }

    pub fn generate_with_ids(&self, n: usize, first_id: u32, seed: u64) -> Result<Dataset> {
        self.validate()?;
        if n < self.num_classes {
            return Err(Error::Data(format!(
                "need at least {} samples, asked for {n}",
                self.num_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cdfs: Vec<Vec<f64>> = (0..self.num_classes)
            .map(|c| {
                let mut acc = 0.0;
                self.token_probs(c)
                    .into_iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect()
            })
            .collect();
        let samples = (0..n)
            .map(|i| {
                let label = rng.random_range(0..self.num_classes);
                let cdf = &cdfs[label];
                let tokens = (0..self.seq)
                    .map(|_| {
                        let u: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
                        cdf.partition_point(|&x| x <= u).min(self.vocab - 1) as u32
                    })
                    .collect();
                Sample {
                    id: first_id + i as u32,
                    tokens,
                    label: label as u32,
                }
            })
            .collect();
        Ok(Dataset {
            vocab: self.vocab,
            num_classes: self.num_classes,
            seq: self.seq,
            samples,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub alpha: f64,
    pub seed: u64,
}

/// One client's local data plus its single-pass cursor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalShard {
    pub client_id: u32,
    pub samples: Vec<Sample>,
    cursor: usize,
}

impl LocalShard {
    pub fn new(client_id: u32, samples: Vec<Sample>) -> Self {
        LocalShard {
            client_id,
            samples,
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn remaining(&self) -> usize {
        self.samples.len() - self.cursor
    }

    pub fn is_exhausted(&self) -> bool {
        self.cursor >= self.samples.len()
    }

    /// Advances past the next `batch_size` samples (fewer at the end).
    pub fn next_batch(&mut self, batch_size: usize) -> Option<&[Sample]> {
        if self.is_exhausted() || batch_size == 0 {
            return None;
        }
        let start = self.cursor;
        self.cursor = (start + batch_size).min(self.samples.len());
        Some(&self.samples[start..self.cursor])
    }

    pub fn num_batches(&self, batch_size: usize) -> usize {
        self.samples.len().div_ceil(batch_size.max(1))
    }
}

fn dirichlet(rng: &mut ChaCha8Rng, alpha: f64, k: usize) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("alpha {alpha}: {e}")))?;
    loop {
        let g: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let z: f64 = g.iter().sum();
        if z > 0.0 && z.is_finite() {
            return Ok(g.into_iter().map(|x| x / z).collect());
        }
    }
}

/// Per class, splits that class's samples across clients by Dirichlet(α)
/// proportions, then shuffles each shard.
pub fn partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<LocalShard>> {
    if spec.num_clients == 0 {
        return Err(Error::Config("num_clients must be at least 1".into()));
    }
    if !(spec.alpha > 0.0) || !spec.alpha.is_finite() {
        return Err(Error::Config(format!("alpha {} must be finite and > 0", spec.alpha)));
    }
    if spec.num_clients > dataset.len() {
        return Err(Error::Partition(format!(
            "{} clients but only {} samples",
            spec.num_clients,
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class[s.label as usize].push(i);
    }
    for _ in 0..PARTITION_RETRIES {
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); spec.num_clients];
        for idx in &by_class {
            let mut idx = idx.clone();
            idx.shuffle(&mut rng);
            let p = dirichlet(&mut rng, spec.alpha, spec.num_clients)?;
            let n = idx.len();
            let mut acc = 0.0;
            let mut start = 0;
            for (c, share) in p.iter().enumerate() {
                acc += share;
                let end = if c + 1 == spec.num_clients {
                    n
                } else {
                    ((acc * n as f64).round() as usize).clamp(start, n)
                };
                assigned[c].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
        if assigned.iter().all(|a| !a.is_empty()) {
            return Ok(assigned
                .into_iter()
                .enumerate()
                .map(|(c, mut idx)| {
                    idx.shuffle(&mut rng);
                    let samples = idx.into_iter().map(|i| dataset.samples[i].clone()).collect();
                    LocalShard::new(c as u32, samples)
                })
                .collect());
        }
    }
    Err(Error::Partition(format!(
        "a client received no samples after {PARTITION_RETRIES} redraws (alpha {}, {} clients)",
        spec.alpha, spec.num_clients
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeterogeneityStats {
    /// Mean total-variation distance of client label distributions to the global one.
    pub mean_tv: f64,
    /// Mean over clients of the largest single-label share.
    pub mean_max_share: f64,
}

pub fn heterogeneity(shards: &[LocalShard], num_classes: usize) -> HeterogeneityStats {
    let mut global = vec![0.0; num_classes];
    let mut total = 0.0;
    for s in shards {
        for (g, c) in global.iter_mut().zip(histogram(&s.samples, num_classes)) {
            *g += c as f64;
            total += c as f64;
        }
    }
    global.iter_mut().for_each(|g| *g /= total.max(1.0));
    let mut tv = 0.0;
    let mut max_share = 0.0;
    for s in shards {
        let h = histogram(&s.samples, num_classes);
        let n = s.len().max(1) as f64;
        tv += 0.5 * h.iter().zip(&global).map(|(&c, g)| (c as f64 / n - g).abs()).sum::<f64>();
        max_share += h.iter().copied().max().unwrap_or(0) as f64 / n;
    }
    let k = shards.len().max(1) as f64;
    HeterogeneityStats {
        mean_tv: tv / k,
        mean_max_share: max_share / k,
    }
}

const DATA_MAGIC: &[u8; 4] = b"FMDS";
const DATA_VERSION: u16 = 1;

/// Little-endian: magic, version u16, client_id u32 (`u32::MAX` for a full
/// dataset), vocab u32, classes u16, seq u16, count u32, then per sample
/// id u32, label u16, `seq` tokens u32.
pub fn write_samples<W: Write>(
    w: &mut W,
    client_id: u32,
    vocab: usize,
    num_classes: usize,
    seq: usize,
    samples: &[Sample],
) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + samples.len() * (6 + 4 * seq));
    buf.extend_from_slice(DATA_MAGIC);
    buf.extend_from_slice(&DATA_VERSION.to_le_bytes());
    buf.extend_from_slice(&client_id.to_le_bytes());
    buf.extend_from_slice(&(vocab as u32).to_le_bytes());
    buf.extend_from_slice(&(num_classes as u16).to_le_bytes());
    buf.extend_from_slice(&(seq as u16).to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        if s.tokens.len() != seq {
            return Err(Error::Data(format!("sample {} has {} tokens, expected {seq}", s.id, s.tokens.len())));
        }
        buf.extend_from_slice(&s.id.to_le_bytes());
        buf.extend_from_slice(&(s.label as u16).to_le_bytes());
        for t in &s.tokens {
            buf.extend_from_slice(&t.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_dataset<W: Write>(w: &mut W, d: &Dataset) -> Result<()> {
    write_samples(w, u32::MAX, d.vocab, d.num_classes, d.seq, &d.samples)
}

/// Returns `(client_id, dataset)`.
pub fn read_samples<R: Read>(r: &mut R) -> Result<(u32, Dataset)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = crate::wire::Cursor::new(&bytes);
    if c.take(4)? != DATA_MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let version = c.u16()?;
    if version != DATA_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let client_id = c.u32()?;
    let vocab = c.u32()? as usize;
    let num_classes = c.u16()? as usize;
    let seq = c.u16()? as usize;
    let n = c.u32()? as usize;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let id = c.u32()?;
        let label = c.u16()? as u32;
        let tokens = (0..seq).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        samples.push(Sample { id, tokens, label });
    }
    c.finish()?;
    Ok((
        client_id,
        Dataset {
            vocab,
            num_classes,
            seq,
            samples,
        },
    ))
}
