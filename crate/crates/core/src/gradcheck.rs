//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::ParamGroup;
use crate::tensor::Tensor;

/// Gradients smaller than this are compared on an absolute scale.
pub const ABS_FLOOR: f64 = 1e-4;

fn scalar_value(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::Dimension(format!("loss must be scalar, got {:?}", t.shape())));
    }
    let x = t.data()[0];
    if !x.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {x}")));
    }
    Ok(x)
}

/// Max over every parameter entry of `|analytic - numeric| / max(|a|, |n|, ABS_FLOOR)`.
pub fn grad_check<F>(params: &ParamGroup, eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamGroup) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::State(format!("finite-difference eps {eps} outside [1e-7, 1e-4]")));
    }
    let mut analytic = params.clone();
    analytic.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, &analytic)?;
    scalar_value(&g, loss)?;
    g.backward(loss, &mut analytic)?;

    let eval = |p: &ParamGroup| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, p)?;
        scalar_value(&g, l)
    };

    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut probe = params.clone();
    for name in &names {
        let base = params.get(name).expect("listed").data().to_vec();
        let grad = analytic
            .get(name)
            .and_then(Tensor::grad)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; base.len()]);
        let mut work = base.clone();
        for i in 0..base.len() {
            work[i] = base[i] + eps;
            probe.set_data(name, &work)?;
            let up = eval(&probe)?;
            work[i] = base[i] - eps;
            probe.set_data(name, &work)?;
            let down = eval(&probe)?;
            work[i] = base[i];
            probe.set_data(name, &work)?;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad[i];
            let denom = a.abs().max(numeric.abs()).max(ABS_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn group(entries: Vec<(&str, Tensor)>) -> ParamGroup {
    let mut p = ParamGroup::new();
    for (n, t) in entries {
        p.insert(n, t).expect("unique names");
    }
    p
}

/// Runs the gradient check of every differentiable op on random inputs.
/// Each check reduces the op's output to a scalar through a fixed random
/// projection so that every output entry contributes.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-5;
    let mut out = Vec::new();
    let mut push = |name: &str, err: f64| {
        out.push(GradCheckReport {
            name: name.to_string(),
            max_rel_error: err,
        })
    };

    // Weighted sum of every entry so gradients are non-uniform.
    fn reduce(g: &mut Graph, v: Var, w: &Tensor) -> Result<Var> {
        let wv = g.input(w.clone());
        let r = g.reshape(v, w.shape())?;
        let m = g.mul(r, wv)?;
        Ok(g.sum_all(m))
    }

    let w34 = random_tensor(&mut rng, &[3, 4]);
    let w32 = random_tensor(&mut rng, &[3, 2]);

    let p = group(vec![
        ("a", random_tensor(&mut rng, &[3, 4])),
        ("b", random_tensor(&mut rng, &[4, 2])),
    ]);
    push(
        "matmul",
        grad_check(&p, eps, |g, p| {
            let a = g.param("a", p)?;
            let b = g.param("b", p)?;
            let y = g.matmul(a, b)?;
            reduce(g, y, &w32)
        })?,
    );

    let p = group(vec![
        ("a", random_tensor(&mut rng, &[3, 4])),
        ("b", random_tensor(&mut rng, &[3, 4])),
    ]);
    push(
        "add",
        grad_check(&p, eps, |g, p| {
            let a = g.param("a", p)?;
            let b = g.param("b", p)?;
            let y = g.add(a, b)?;
            reduce(g, y, &w34)
        })?,
    );
    push(
        "sub_mul",
        grad_check(&p, eps, |g, p| {
            let a = g.param("a", p)?;
            let b = g.param("b", p)?;
            let d = g.sub(a, b)?;
            let y = g.mul(d, a)?;
            reduce(g, y, &w34)
        })?,
    );
    push(
        "scale",
        grad_check(&p, eps, |g, p| {
            let a = g.param("a", p)?;
            let y = g.scale(a, -1.7);
            reduce(g, y, &w34)
        })?,
    );

    let p = group(vec![("x", random_tensor(&mut rng, &[3, 4]))]);
    let w43 = random_tensor(&mut rng, &[4, 3]);
    push(
        "transpose",
        grad_check(&p, eps, |g, p| {
            let x = g.param("x", p)?;
            let y = g.transpose(x)?;
            reduce(g, y, &w43)
        })?,
    );
    push(
        "gelu",
        grad_check(&p, eps, |g, p| {
            let x = g.param("x", p)?;
            let y = g.gelu(x);
            reduce(g, y, &w34)
        })?,
    );
    push(
        "softmax",
        grad_check(&p, eps, |g, p| {
            let x = g.param("x", p)?;
            let y = g.softmax(x);
            reduce(g, y, &w34)
        })?,
    );
    push(
        "sigmoid_one_minus",
        grad_check(&p, eps, |g, p| {
            let x = g.param("x", p)?;
            let s = g.sigmoid(x);
            let y = g.one_minus(s);
            reduce(g, y, &w34)
        })?,
    );
    push(
        "cross_entropy",
        grad_check(&p, eps, |g, p| {
            let x = g.param("x", p)?;
            g.cross_entropy(x, &[0, 3, 1])
        })?,
    );
    let target = random_tensor(&mut rng, &[3, 4]);
    push(
        "mse",
        grad_check(&p, eps, |g, p| {
            let x = g.param("x", p)?;
            g.mse(x, &target)
        })?,
    );

    let p = group(vec![
        ("x", random_tensor(&mut rng, &[3, 4])),
        ("gamma", random_tensor(&mut rng, &[4])),
        ("beta", random_tensor(&mut rng, &[4])),
        ("bias", random_tensor(&mut rng, &[4])),
        ("s", random_tensor(&mut rng, &[1])),
    ]);
    push(
        "layernorm",
        grad_check(&p, eps, |g, p| {
            let x = g.param("x", p)?;
            let ga = g.param("gamma", p)?;
            let be = g.param("beta", p)?;
            let y = g.layernorm(x, ga, be)?;
            reduce(g, y, &w34)
        })?,
    );
    push(
        "add_bias_mul_scalar",
        grad_check(&p, eps, |g, p| {
            let x = g.param("x", p)?;
            let b = g.param("bias", p)?;
            let s = g.param("s", p)?;
            let y = g.add_bias(x, b)?;
            let y = g.mul_scalar(y, s)?;
            reduce(g, y, &w34)
        })?,
    );

    let p = group(vec![("table", random_tensor(&mut rng, &[5, 3]))]);
    let w43b = random_tensor(&mut rng, &[4, 3]);
    push(
        "embedding",
        grad_check(&p, eps, |g, p| {
            let t = g.param("table", p)?;
            let y = g.embedding(t, &[4, 0, 4, 2])?;
            reduce(g, y, &w43b)
        })?,
    );

    let p = group(vec![("x", random_tensor(&mut rng, &[2, 3, 4]))]);
    let w24 = random_tensor(&mut rng, &[2, 4]);
    push(
        "mean_pool_seq",
        grad_check(&p, eps, |g, p| {
            let x = g.param("x", p)?;
            let y = g.mean_pool_seq(x)?;
            reduce(g, y, &w24)
        })?,
    );

    let p = group(vec![("w", random_tensor(&mut rng, &[6]))]);
    push(
        "half_squared_norm",
        grad_check(&p, eps, |g, p| {
            let w = g.param("w", p)?;
            let sq = g.mul(w, w)?;
            let s = g.sum_all(sq);
            Ok(g.scale(s, 0.5))
        })?,
    );

    // One-layer low-rank adapter regressed onto a fixed target.
    let p = group(vec![
        ("down", random_tensor(&mut rng, &[6, 2])),
        ("up", random_tensor(&mut rng, &[2, 6])),
        ("bias", random_tensor(&mut rng, &[6])),
    ]);
    let x = random_tensor(&mut rng, &[4, 6]);
    let target = random_tensor(&mut rng, &[4, 6]);
    push(
        "adapter_mse",
        grad_check(&p, eps, |g, p| {
            let xv = g.input(x.clone());
            let d = g.param("down", p)?;
            let u = g.param("up", p)?;
            let b = g.param("bias", p)?;
            let h = g.matmul(xv, d)?;
            let h = g.gelu(h);
            let y = g.matmul(h, u)?;
            let y = g.add_bias(y, b)?;
            g.mse(y, &target)
        })?,
    );

    Ok(out)
}

/// Full side-network loss over two backbone types with every parameter
/// perturbed away from its initialization.
pub fn side_network_check(seed: u64) -> Result<GradCheckReport> {
    use crate::alignment::{make_plan, DSideRule};
    use crate::backbone::BackboneConfig;
    use crate::sidenet::{compute_deviation, SideInput, SideNetwork};

    let plan = make_plan(
        &[BackboneConfig::desk("a", 2, 8, 16, 3), BackboneConfig::desk("b", 3, 12, 16, 3)],
        DSideRule::Explicit(6),
    )?;
    let mut net = SideNetwork::new(&plan, 2, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let names: Vec<String> = net.params().names().map(str::to_string).collect();
    for n in names {
        let data: Vec<f64> = net.params().get(&n).expect("listed name").data().iter().map(|x| x + rng.random_range(-0.3..0.3)).collect();
        net.params_mut().set_data(&n, &data)?;
    }
    let mut blocks = |b: usize, h: usize| -> Vec<Tensor> { (0..2).map(|_| random_tensor(&mut rng, &[b, 3, h])).collect() };
    let (blocks_a, blocks_b) = (blocks(2, 8), blocks(3, 12));
    let dev = |b: usize, rng: &mut ChaCha8Rng| {
        let logits = Tensor::from_fn(&[b, 3], |_| rng.random_range(-2.0..2.0));
        compute_deviation(&logits, &(0..b).map(|i| i % 3).collect::<Vec<_>>())
    };
    let (dev_a, dev_b) = (dev(2, &mut rng)?, dev(3, &mut rng)?);
    let inputs = [
        SideInput { backbone_id: "a", blocks: &blocks_a, deviation: &dev_a },
        SideInput { backbone_id: "b", blocks: &blocks_b, deviation: &dev_b },
    ];
    Ok(GradCheckReport {
        name: "side_network_loss".into(),
        max_rel_error: grad_check(net.params(), 1e-5, |g, p| net.build_loss(g, p, &inputs))?,
    })
}

/// Every op check plus the side-network loss.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = op_suite(seed)?;
    out.push(side_network_check(seed)?);
    Ok(out)
}
