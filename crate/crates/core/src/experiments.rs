//! Small end-to-end experiments shared by the CLI and the acceptance suite.

use std::collections::BTreeMap;

use serde::Serialize;
use toml::Spanned;

use crate::alignment::{make_plan, DSideRule};
use crate::backbone::{build, BackboneConfig};
use crate::client::{process_batch, token_batch};
use crate::config::{DSideSetting, Resolved, RunConfig};
use crate::data::{LocalShard, SyntheticTask};
use crate::error::{Error, Result};
use crate::server::{evaluate, EvalReport, EvalSet};
use crate::sim::{simulate, simulate_sync_baseline, RunMetrics, SimSetup};
use crate::optim::AdamW;
use crate::seed;
use crate::server::{ActivationCache, Server, TrainConfig};
use crate::sidenet::{corrected_argmax, SideNetwork};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemorizationReport {
    pub samples: usize,
    pub epochs: usize,
    pub steps: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub backbone_accuracy: f64,
    pub corrected_accuracy: f64,
}

/// Uploads a 16-sample shard from one device, then runs standalone epochs
/// over the cache and scores `corrected_predict` on the same samples.
/// Learning rate for the memorization check; the 5e-4 default moves too
/// little in 40 steps.
pub const MEMORIZATION_LR: f64 = 2e-2;

pub fn memorization(root: u64, epochs: usize, lr: f64) -> Result<MemorizationReport> {
    const N: usize = 16;
    let cfg = BackboneConfig {
        init_seed: seed::sub_seed(root, "init:backbone"),
        ..BackboneConfig::desk("mem", 4, 32, 64, 4)
    };
    let plan = make_plan(std::slice::from_ref(&cfg), DSideRule::Auto)?;
    let backbone = build(&cfg)?;
    let task = SyntheticTask {
        vocab: 64,
        num_classes: 4,
        seq: 16,
        signal: 0.3,
        subset_size: 8,
        seed: seed::sub_seed(root, "data"),
    };
    let data = task.generate(N)?;
    let net = SideNetwork::new(&plan, 4, seed::sub_seed(root, "init:side"))?;
    let train = TrainConfig {
        opt: AdamW::with_lr(lr),
        ..TrainConfig::default()
    };
    let cache = ActivationCache::new(seed::rng(root, "cache"));
    let mut server = Server::new(net, cache, train, [0], seed::rng(root, "replay"));
    let mut shard = LocalShard::new(0, data.samples.clone());
    while !shard.is_exhausted() {
        let packet = process_batch(&backbone, &plan, &mut shard, train.minibatch)?;
        server.on_packet(packet, 0.0)?;
    }
    let initial_loss = server.cache_loss()?;
    server.end_of_data(0, 0.0)?;
    server.standalone_tune(epochs, 0.0)?;
    let final_loss = server.cache_loss()?;

    let tokens = token_batch(&data.samples)?;
    let labels: Vec<usize> = data.samples.iter().map(|s| s.label as usize).collect();
    let hits = |pred: &[usize]| pred.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / N as f64;
    let raw: Vec<usize> = {
        let logits = backbone.logits(&tokens)?;
        let zero = Tensor::zeros(logits.shape());
        corrected_argmax(&logits, &zero)?
    };
    let corrected = server.net().corrected_predict(&backbone, &tokens)?;
    Ok(MemorizationReport {
        samples: N,
        epochs,
        steps: server.total_steps(),
        initial_loss,
        final_loss,
        backbone_accuracy: hits(&raw),
        corrected_accuracy: hits(&corrected),
    })
}

/// Bundled experiment configurations.
pub const STRAGGLER_CONFIG: &str = include_str!("../configs/straggler.toml");
pub const HETERO_CONFIG: &str = include_str!("../configs/hetero.toml");
pub const SINGLE_CONFIG: &str = include_str!("../configs/single.toml");
pub const HOMOGENEOUS_CONFIG: &str = include_str!("../configs/homogeneous.toml");

pub fn bundled(name: &str) -> Result<RunConfig> {
    let text = match name {
        "straggler" => STRAGGLER_CONFIG,
        "hetero" => HETERO_CONFIG,
        "single" => SINGLE_CONFIG,
        "homogeneous" => HOMOGENEOUS_CONFIG,
        other => return Err(Error::Config(format!("no bundled config `{other}`"))),
    };
    RunConfig::from_str_named(text, &format!("configs/{name}.toml"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Fleet {
    AllFast,
    AllSlow,
    /// Only the last device slowed down.
    Mixed,
}

impl Fleet {
    pub const ALL: [Fleet; 3] = [Fleet::AllFast, Fleet::AllSlow, Fleet::Mixed];

    /// Slows the chosen devices by `factor`, keeping the server unchanged.
    pub fn apply(self, base: &Resolved, factor: f64) -> Resolved {
        let mut r = base.clone();
        let n = r.clients.len();
        for (i, c) in r.clients.iter_mut().enumerate() {
            let slow = match self {
                Fleet::AllFast => false,
                Fleet::AllSlow => true,
                Fleet::Mixed => i + 1 == n,
            };
            if slow {
                c.profile = c.profile.slowed(factor);
            }
        }
        r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FleetRun {
    pub fleet: Fleet,
    pub async_time_to_target: Option<f64>,
    pub sync_time_to_target: Option<f64>,
    pub slowest_pass: f64,
    pub async_end: f64,
    pub sync_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StragglerReport {
    pub slowdown: f64,
    pub target_accuracy: f64,
    pub runs: Vec<FleetRun>,
}

impl StragglerReport {
    pub fn run(&self, fleet: Fleet) -> &FleetRun {
        self.runs.iter().find(|r| r.fleet == fleet).expect("every fleet is simulated")
    }

    /// Max minus min async time-to-target across fleets.
    pub fn async_spread(&self) -> Option<f64> {
        let ts: Option<Vec<f64>> = self.runs.iter().map(|r| r.async_time_to_target).collect();
        let ts = ts?;
        let max = ts.iter().copied().fold(f64::MIN, f64::max);
        let min = ts.iter().copied().fold(f64::MAX, f64::min);
        Some(max - min)
    }

    pub fn slowest_pass(&self) -> f64 {
        self.runs.iter().map(|r| r.slowest_pass).fold(0.0, f64::max)
    }

    /// Sync time-to-target of the mixed fleet relative to the all-slow one.
    pub fn sync_mixed_over_slow(&self) -> Option<f64> {
        Some(self.run(Fleet::Mixed).sync_time_to_target? / self.run(Fleet::AllSlow).sync_time_to_target?)
    }

    pub fn mixed_speedup(&self) -> Option<f64> {
        let m = self.run(Fleet::Mixed);
        Some(m.sync_time_to_target? / m.async_time_to_target?)
    }
}

pub fn straggler(base: &Resolved, slowdown: f64) -> Result<StragglerReport> {
    let mut runs = Vec::new();
    for fleet in Fleet::ALL {
        let r = fleet.apply(base, slowdown);
        let setup = r.setup()?;
        let a = simulate(&setup)?.metrics;
        let s = simulate_sync_baseline(&setup)?.metrics;
        runs.push(FleetRun {
            fleet,
            async_time_to_target: a.time_to_target,
            sync_time_to_target: s.time_to_target,
            slowest_pass: a.slowest_pass(),
            async_end: a.server.end_time,
            sync_end: s.server.end_time,
        });
    }
    Ok(StragglerReport {
        slowdown,
        target_accuracy: base.params.target_accuracy,
        runs,
    })
}

/// Final evaluation of an async run.
pub fn final_eval(setup: &SimSetup) -> Result<RunMetrics> {
    Ok(simulate(setup)?.metrics)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GlobalVsSingle {
    pub seed: u64,
    pub global: EvalReport,
    /// Per backbone type, the mean accuracy of networks each trained on a
    /// single device's data.
    pub single: BTreeMap<String, f64>,
}

impl GlobalVsSingle {
    pub fn mean_single(&self) -> f64 {
        self.single.values().sum::<f64>() / self.single.len() as f64
    }
}

pub fn global_vs_single(cfg: &RunConfig, seed: u64) -> Result<GlobalVsSingle> {
    let r = cfg.resolve(seed)?;
    let global = final_eval(&r.setup()?)?.final_eval;
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (i, c) in r.clients.iter().enumerate() {
        let acc = final_eval(&r.setup_device(i)?)?.final_eval.global;
        let e = sums.entry(c.profile.backbone_id.clone()).or_insert((0.0, 0));
        e.0 += acc;
        e.1 += 1;
    }
    let single = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    Ok(GlobalVsSingle { seed, global, single })
}

pub fn with_alpha(cfg: &RunConfig, alpha: f64) -> RunConfig {
    let mut c = cfg.clone();
    c.partition.alpha = alpha;
    c
}

pub fn global_accuracy(cfg: &RunConfig, seed: u64) -> Result<f64> {
    Ok(final_eval(&cfg.resolve(seed)?.setup()?)?.final_eval.global)
}

/// Accuracy lost when block `j`'s activations are replaced by zeros, for
/// each block of a trained network.
pub fn block_importance(net: &crate::sidenet::SideNetwork, sets: &[EvalSet]) -> Result<Vec<f64>> {
    let base = evaluate(net, sets)?.global;
    (0..net.plan().block_count)
        .map(|j| {
            let probed: Vec<EvalSet> = sets
                .iter()
                .map(|s| {
                    let mut s = s.clone();
                    s.blocks[j] = Tensor::zeros(s.blocks[j].shape());
                    s
                })
                .collect();
            Ok(base - evaluate(net, &probed)?.global)
        })
        .collect()
}

/// Layers of the `k` most important blocks, in layer order.
pub fn top_layers(importance: &[f64], layers: &[usize], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..importance.len()).collect();
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = order.into_iter().take(k).map(|j| layers[j]).collect();
    picked.sort_unstable();
    picked
}

fn with_taps(cfg: &RunConfig, block_count: Option<usize>, strategy: &str, taps: Option<Vec<usize>>) -> RunConfig {
    let mut c = cfg.clone();
    c.alignment.block_count = block_count;
    c.alignment.strategy = Spanned::new(0..0, strategy.to_string());
    c.alignment.taps = taps;
    c
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSelection {
    pub seed: u64,
    pub block_count: usize,
    pub full_depth_importance: Vec<f64>,
    pub uniform_taps: Vec<usize>,
    pub importance_taps: Vec<usize>,
    pub uniform: f64,
    pub importance: f64,
}

/// Uniform taps against taps chosen by leave-one-block-out importance on a
/// full-depth run, on a single backbone type.
pub fn layer_selection(cfg: &RunConfig, seed: u64) -> Result<LayerSelection> {
    let base = cfg.resolve(seed)?;
    let id = base.plan.backbone_ids().next().map(str::to_string).ok_or_else(|| Error::Config("no backbone".into()))?;
    let block_count = base.plan.block_count;
    let depth = base.backbones[&id].num_layers();

    let full = with_taps(cfg, Some(depth), "uniform", None).resolve(seed)?;
    let out = simulate(&full.setup()?)?;
    let importance = block_importance(&out.net, &full.eval_sets)?;
    let chosen = top_layers(&importance, full.plan.taps(&id)?, block_count);

    let uniform = global_accuracy(&with_taps(cfg, Some(block_count), "uniform", None), seed)?;
    let picked = with_taps(cfg, Some(block_count), "explicit", Some(chosen.clone()));
    let importance_acc = global_accuracy(&picked, seed)?;
    Ok(LayerSelection {
        seed,
        block_count,
        full_depth_importance: importance,
        uniform_taps: base.plan.taps(&id)?.to_vec(),
        importance_taps: chosen,
        uniform,
        importance: importance_acc,
    })
}

/// Final accuracy for each explicit side width.
pub fn d_side_sweep(cfg: &RunConfig, sizes: &[usize], seed: u64) -> Result<Vec<(usize, f64)>> {
    sizes
        .iter()
        .map(|&d| {
            let mut c = cfg.clone();
            c.alignment.d_side = Spanned::new(0..0, DSideSetting::Size(d));
            Ok((d, global_accuracy(&c, seed)?))
        })
        .collect()
}
