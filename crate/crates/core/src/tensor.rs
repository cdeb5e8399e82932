//! Dense row-major `f64` tensors and the forward kernels shared by the
//! frozen backbone (plain evaluation) and the autodiff graph.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::parallel;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor trainable. Gradient buffers only exist on trainable tensors.
    pub fn into_trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Drops trainability and any gradient buffer.
    pub fn into_frozen(mut self) -> Self {
        self.requires_grad = false;
        self.grad = None;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    /// Adds `g` into the gradient buffer. Frozen tensors refuse the write.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if !self.requires_grad {
            return Err(Error::State(
                "attempted to accumulate gradient into a frozen tensor".into(),
            ));
        }
        if g.len() != self.data.len() {
            return Err(Error::dim(format!(
                "gradient length {} does not match tensor of {} elements",
                g.len(),
                self.data.len()
            )));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Same data viewed under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        })
    }

    /// Dimensions as (rows, cols) where cols is the last axis.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        let rows = if cols == 0 { 0 } else { self.numel() / cols };
        (rows, cols)
    }

    /// FNV-1a over shape and the bit patterns of the data.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for &d in &self.shape {
            h.write_u64(d as u64);
        }
        for &x in &self.data {
            h.write_u64(x.to_bits());
        }
        h.finish()
    }

    /// Copies rows `idx` of a `[n, ...]` tensor into a new `[idx.len(), ...]` tensor.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let n = *self.shape.first().ok_or_else(|| Error::dim("gather on a scalar"))?;
        let stride = if n == 0 { 0 } else { self.numel() / n };
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            if i >= n {
                return Err(Error::Index(format!("row {i} out of range for {n} rows")));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor::new(shape, data)
    }

    /// Stacks tensors along the leading axis; trailing shapes must agree.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::dim(format!(
                    "concat trailing shapes differ: {:?} vs {:?}",
                    p.shape, first.shape
                )));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Tensor::new(shape, data)
    }
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
    pub(crate) fn write_u64(&mut self, x: u64) {
        for b in x.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

// ---------------------------------------------------------------------------
// matmul tracing

thread_local! {
    static MATMUL_TRACE: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Records a matmul of shape `[m,k] x [k,n]`, `count` times, in the calling
/// thread's trace (if one is active).
pub fn record_matmul(count: usize, m: usize, k: usize, n: usize) {
    MATMUL_TRACE.with(|t| {
        if let Some(acc) = t.get() {
            t.set(Some(acc + 2 * (count * m * k * n) as u64));
        }
    });
}

/// Runs `f` and returns the number of matmul FLOPs (2·m·k·n per product)
/// issued from this thread while it ran.
pub fn trace_matmul_flops<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let prev = MATMUL_TRACE.with(|t| t.replace(Some(0)));
    let out = f();
    let flops = MATMUL_TRACE.with(|t| t.replace(prev)).unwrap_or(0);
    if let Some(p) = prev {
        MATMUL_TRACE.with(|t| t.set(Some(p + flops)));
    }
    (out, flops)
}

// ---------------------------------------------------------------------------
// kernels

/// Raw row-major product into `out` (`[m,n]`, overwritten). Not traced.
pub(crate) fn matmul_slices(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, orow: &mut [f64]| {
        orow.iter_mut().for_each(|x| *x = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if n == 0 {
        return;
    }
    parallel::for_each_chunk_mut(out, n, m * k * n, row);
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(Error::dim(format!(
            "matmul expects 2-d operands, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    record_matmul(1, m, k, n);
    let mut out = vec![0.0; m * n];
    matmul_slices(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 {
        return Err(Error::dim(format!("transpose expects 2-d, got {:?}", a.shape)));
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::dim(format!(
            "{what}: shapes differ {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape.clone(), data)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "sub")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Tensor::new(a.shape.clone(), data)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|x| x * s).collect(),
        requires_grad: false,
        grad: None,
    }
}

/// `x[.., n] + bias[n]`, broadcast over every leading index.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, n) = x.rows_cols();
    if bias.shape != [n] {
        return Err(Error::dim(format!(
            "bias {:?} does not match last axis of {:?}",
            bias.shape, x.shape
        )));
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(n.max(1)) {
        for (o, b) in row.iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Per-row statistics saved by layer normalization for the backward pass.
#[derive(Clone, Debug)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Normalizes every row over the last axis, then applies `gamma`/`beta`.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, NormStats)> {
    let (rows, n) = x.rows_cols();
    if gamma.shape != [n] || beta.shape != [n] {
        return Err(Error::dim(format!(
            "layernorm affine params {:?}/{:?} do not match {:?}",
            gamma.shape, beta.shape, x.shape
        )));
    }
    let mut out = vec![0.0; x.numel()];
    let mut mean = vec![0.0; rows];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data[r * n..(r + 1) * n];
        let mu = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
        let rs = 1.0 / (var + LAYERNORM_EPS).sqrt();
        mean[r] = mu;
        rstd[r] = rs;
        for j in 0..n {
            out[r * n + j] = (row[j] - mu) * rs * gamma.data[j] + beta.data[j];
        }
    }
    Ok((Tensor::new(x.shape.clone(), out)?, NormStats { mean, rstd }))
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
        requires_grad: false,
        grad: None,
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let (_, n) = x.rows_cols();
    let mut out = vec![0.0; x.numel()];
    if n > 0 {
        for (row, o) in x.data.chunks(n).zip(out.chunks_mut(n)) {
            softmax_into(row, o);
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
        requires_grad: false,
        grad: None,
    }
}

/// Mean over the middle (sequence) axis of a `[batch, seq, hidden]` tensor.
pub fn mean_pool_seq(x: &Tensor) -> Result<Tensor> {
    if x.shape.len() != 3 {
        return Err(Error::dim(format!(
            "mean-pool expects [batch, seq, hidden], got {:?}",
            x.shape
        )));
    }
    let (b, s, h) = (x.shape[0], x.shape[1], x.shape[2]);
    let mut out = vec![0.0; b * h];
    for i in 0..b {
        let o = &mut out[i * h..(i + 1) * h];
        for t in 0..s {
            let row = &x.data[(i * s + t) * h..(i * s + t + 1) * h];
            for (a, v) in o.iter_mut().zip(row) {
                *a += v;
            }
        }
        o.iter_mut().for_each(|a| *a /= s as f64);
    }
    Tensor::new(vec![b, h], out)
}

/// Row-wise argmax over the last axis (first maximum wins).
pub fn argmax_rows(x: &Tensor) -> Vec<usize> {
    let (_, n) = x.rows_cols();
    if n == 0 {
        return Vec::new();
    }
    x.data
        .chunks(n)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
