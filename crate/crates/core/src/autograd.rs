//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op as a node. Nodes are *tracked* when they
//! depend on a parameter pulled in with [`Graph::param`]; constants added
//! with [`Graph::input`] are never tracked, so backward cannot produce (let
//! alone write) a gradient for them. [`Graph::backward`] pushes adjoints
//! back through tracked nodes and accumulates the parameter gradients into
//! the [`ParamGroup`] the parameters came from.

use crate::error::{Error, Result};
use crate::optim::ParamGroup;
use crate::tensor::{self, NormStats, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    OneMinus(Var),
    Sigmoid(Var),
    Transpose(Var),
    Reshape(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MeanPoolSeq(Var),
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A constant. Never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t.into_frozen(), Op::Input, false)
    }

    /// Pulls trainable parameter `name` from `params` into the graph.
    pub fn param(&mut self, name: &str, params: &ParamGroup) -> Result<Var> {
        let t = params
            .get(name)
            .ok_or_else(|| Error::State(format!("no parameter `{name}`")))?;
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        Ok(self.push(value, Op::Param(name.to_string()), true))
    }

    /// Uses a parameter's current value as a constant (inference mode).
    pub fn param_frozen(&mut self, name: &str, params: &ParamGroup) -> Result<Var> {
        let t = params
            .get(name)
            .ok_or_else(|| Error::State(format!("no parameter `{name}`")))?;
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        Ok(self.input(value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::matmul(self.value(a), self.value(b))?;
        let tr = self.tracked(&[a, b]);
        Ok(self.push(y, Op::MatMul(a, b), tr))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::add(self.value(a), self.value(b))?;
        let tr = self.tracked(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), tr))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::sub(self.value(a), self.value(b))?;
        let tr = self.tracked(&[a, b]);
        Ok(self.push(y, Op::Sub(a, b), tr))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension(format!(
                "mul: shapes differ {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let y = Tensor::new(ta.shape().to_vec(), data)?;
        let tr = self.tracked(&[a, b]);
        Ok(self.push(y, Op::Mul(a, b), tr))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let y = tensor::add_bias(self.value(x), self.value(b))?;
        let tr = self.tracked(&[x, b]);
        Ok(self.push(y, Op::AddBias(x, b), tr))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let y = tensor::scale(self.value(x), s);
        let tr = self.tracked(&[x]);
        self.push(y, Op::Scale(x, s), tr)
    }

    /// `s * x` where `s` is a one-element node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Dimension(format!(
                "mul_scalar expects a one-element scale, got {:?}",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).data()[0];
        let y = tensor::scale(self.value(x), sv);
        let tr = self.tracked(&[x, s]);
        Ok(self.push(y, Op::MulScalar(x, s), tr))
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = Tensor::from_fn(t.shape(), |i| 1.0 - t.data()[i]);
        let tr = self.tracked(&[x]);
        self.push(y, Op::OneMinus(x), tr)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = Tensor::from_fn(t.shape(), |i| tensor::sigmoid_scalar(t.data()[i]));
        let tr = self.tracked(&[x]);
        self.push(y, Op::Sigmoid(x), tr)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let y = tensor::transpose(self.value(x))?;
        let tr = self.tracked(&[x]);
        Ok(self.push(y, Op::Transpose(x), tr))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        let tr = self.tracked(&[x]);
        Ok(self.push(y, Op::Reshape(x), tr))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = tensor::gelu(self.value(x));
        let tr = self.tracked(&[x]);
        self.push(y, Op::Gelu(x), tr)
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (y, stats) = tensor::layernorm(self.value(x), self.value(gamma), self.value(beta))?;
        let tr = self.tracked(&[x, gamma, beta]);
        Ok(self.push(y, Op::LayerNorm { x, gamma, beta, stats }, tr))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let y = tensor::softmax(self.value(x));
        let tr = self.tracked(&[x]);
        self.push(y, Op::Softmax(x), tr)
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        let (rows, c) = l.rows_cols();
        if labels.len() != rows {
            return Err(Error::Dimension(format!(
                "cross-entropy: {} labels for {} rows",
                labels.len(),
                rows
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let probs = tensor::softmax(l).into_data();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -probs[i * c + y].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / rows as f64;
        let tr = self.tracked(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            tr,
        ))
    }

    /// Mean over rows of the squared L2 distance to `target`.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::Dimension(format!(
                "mse: prediction {:?} vs target {:?}",
                p.shape(),
                target.shape()
            )));
        }
        let (rows, _) = p.rows_cols();
        let sq: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let loss = sq / rows.max(1) as f64;
        let tr = self.tracked(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
            tr,
        ))
    }

    /// Row lookup: `ids.len()` rows of the `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let y = t.gather_rows(ids)?;
        let tr = self.tracked(&[table]);
        Ok(self.push(
            y,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            tr,
        ))
    }

    pub fn mean_pool_seq(&mut self, x: Var) -> Result<Var> {
        let y = tensor::mean_pool_seq(self.value(x))?;
        let tr = self.tracked(&[x]);
        Ok(self.push(y, Op::MeanPoolSeq(x), tr))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let tr = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), tr)
    }

    /// Reverse pass from the scalar `loss`; parameter gradients are added to
    /// `params`. Untracked nodes (constants and anything derived only from
    /// constants) are skipped.
    pub fn backward(&self, loss: Var, params: &mut ParamGroup) -> Result<()> {
        let l = self.value(loss);
        if l.numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got {:?}",
                l.shape()
            )));
        }
        if !l.data()[0].is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", l.data()[0])));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(gy) = adj[idx].take() else {
                continue;
            };
            self.propagate(node, &gy, &mut adj, params)?;
        }
        Ok(())
    }

    fn propagate(
        &self,
        node: &Node,
        gy: &[f64],
        adj: &mut [Option<Vec<f64>>],
        params: &mut ParamGroup,
    ) -> Result<()> {
        let mut send = |v: Var, g: Vec<f64>| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Input => {}
            Op::Param(name) => params.accumulate_grad(name, gy)?,
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let gyt = Tensor::new(vec![m, n], gy.to_vec())?;
                if self.is_tracked(*a) {
                    let bt = tensor::transpose(tb)?;
                    let mut ga = vec![0.0; m * k];
                    tensor::matmul_slices(gyt.data(), bt.data(), &mut ga, m, n, k);
                    send(*a, ga);
                }
                if self.is_tracked(*b) {
                    let at = tensor::transpose(ta)?;
                    let mut gb = vec![0.0; k * n];
                    tensor::matmul_slices(at.data(), gyt.data(), &mut gb, k, m, n);
                    send(*b, gb);
                }
            }
            Op::Add(a, b) => {
                send(*a, gy.to_vec());
                send(*b, gy.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, gy.to_vec());
                send(*b, gy.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                send(*a, gy.iter().zip(tb.data()).map(|(g, y)| g * y).collect());
                send(*b, gy.iter().zip(ta.data()).map(|(g, x)| g * x).collect());
            }
            Op::AddBias(x, b) => {
                let n = self.value(*b).numel();
                let mut gb = vec![0.0; n];
                for row in gy.chunks(n.max(1)) {
                    gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                }
                send(*x, gy.to_vec());
                send(*b, gb);
            }
            Op::Scale(x, s) => send(*x, gy.iter().map(|g| g * s).collect()),
            Op::MulScalar(x, s) => {
                let sv = self.value(*s).data()[0];
                let tx = self.value(*x);
                let gs: f64 = gy.iter().zip(tx.data()).map(|(g, v)| g * v).sum();
                send(*x, gy.iter().map(|g| g * sv).collect());
                send(*s, vec![gs]);
            }
            Op::OneMinus(x) => send(*x, gy.iter().map(|g| -g).collect()),
            Op::Sigmoid(x) => {
                let y = node.value.data();
                send(*x, gy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect());
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let gt = Tensor::new(s.to_vec(), gy.to_vec())?;
                send(*x, tensor::transpose(&gt)?.into_data());
            }
            Op::Reshape(x) => send(*x, gy.to_vec()),
            Op::Gelu(x) => {
                let tx = self.value(*x);
                send(
                    *x,
                    gy.iter()
                        .zip(tx.data())
                        .map(|(g, v)| g * tensor::gelu_grad_scalar(*v))
                        .collect(),
                );
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let tx = self.value(*x);
                let tg = self.value(*gamma);
                let (rows, n) = tx.rows_cols();
                let mut gx = vec![0.0; tx.numel()];
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                let mut xhat = vec![0.0; n];
                let mut gxhat = vec![0.0; n];
                for r in 0..rows {
                    let (mu, rs) = (stats.mean[r], stats.rstd[r]);
                    let row = &tx.data()[r * n..(r + 1) * n];
                    let grow = &gy[r * n..(r + 1) * n];
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for j in 0..n {
                        xhat[j] = (row[j] - mu) * rs;
                        gxhat[j] = grow[j] * tg.data()[j];
                        gg[j] += grow[j] * xhat[j];
                        gb[j] += grow[j];
                        sum_g += gxhat[j];
                        sum_gx += gxhat[j] * xhat[j];
                    }
                    let nf = n as f64;
                    for j in 0..n {
                        gx[r * n + j] = rs / nf * (nf * gxhat[j] - sum_g - xhat[j] * sum_gx);
                    }
                }
                send(*x, gx);
                send(*gamma, gg);
                send(*beta, gb);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let (_, n) = node.value.rows_cols();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), out) in y.chunks(n).zip(gy.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*x, gx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (rows, c) = self.value(*logits).rows_cols();
                let scale = gy[0] / rows as f64;
                let mut g = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    g[i * c + y] -= 1.0;
                }
                g.iter_mut().for_each(|v| *v *= scale);
                send(*logits, g);
            }
            Op::Mse { pred, target } => {
                let tp = self.value(*pred);
                let (rows, _) = tp.rows_cols();
                let scale = 2.0 * gy[0] / rows.max(1) as f64;
                send(
                    *pred,
                    tp.data()
                        .iter()
                        .zip(target)
                        .map(|(p, t)| scale * (p - t))
                        .collect(),
                );
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let (_, d) = tt.rows_cols();
                let mut g = vec![0.0; tt.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    let src = &gy[i * d..(i + 1) * d];
                    g[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += b);
                }
                send(*table, g);
            }
            Op::MeanPoolSeq(x) => {
                let s = self.value(*x).shape().to_vec();
                let (b, seq, h) = (s[0], s[1], s[2]);
                let mut g = vec![0.0; b * seq * h];
                for i in 0..b {
                    for t in 0..seq {
                        for j in 0..h {
                            g[(i * seq + t) * h + j] = gy[i * h + j] / seq as f64;
                        }
                    }
                }
                send(*x, g);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![gy[0]; n]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_receive_no_gradient() {
        let mut p = ParamGroup::new();
        p.insert("w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap();
        let before = x.checksum();
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let w = g.param("w", &p).unwrap();
        let y = g.matmul(xv, w).unwrap();
        let l = g.sum_all(y);
        g.backward(l, &mut p).unwrap();
        assert!(!g.is_tracked(xv));
        assert!(g.value(xv).grad().is_none());
        assert_eq!(g.value(xv).checksum(), before);
        // d/dW sum(x W) = x^T 1
        assert_eq!(p.get("w").unwrap().grad().unwrap(), &[0.5, 0.5, -1.0, -1.0]);
    }

    #[test]
    fn non_scalar_or_non_finite_loss_rejected() {
        let mut p = ParamGroup::new();
        p.insert("w", Tensor::new(vec![2], vec![1.0, f64::INFINITY]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let w = g.param("w", &p).unwrap();
        assert!(matches!(g.backward(w, &mut p), Err(Error::Dimension(_))));
        let s = g.sum_all(w);
        assert!(matches!(g.backward(s, &mut p), Err(Error::Numeric(_))));
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let mut p = ParamGroup::new();
        p.insert("w", Tensor::from_fn(&[3, 3], |i| (i as f64 * 0.37).sin()))
            .unwrap();
        let run = |p: &mut ParamGroup| {
            let mut g = Graph::new();
            let w = g.param("w", p).unwrap();
            let a = g.gelu(w);
            let s = g.softmax(a);
            let l = g.sum_all(s);
            let l2 = g.mul(l, l).unwrap();
            g.backward(l2, p).unwrap();
            let out = (g.value(l2).data()[0], p.get("w").unwrap().grad().unwrap().to_vec());
            p.zero_grad();
            out
        };
        let a = run(&mut p);
        let b = run(&mut p);
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }
}
