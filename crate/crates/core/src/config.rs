//! Run configuration: a TOML file with sections, resolved into built
//! backbones, shards, evaluation sets and simulator parameters.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::accounting::AccountingConfig;
use crate::alignment::{make_plan_with, AlignmentPlan, DSideRule, LayerStrategy, PlanOverrides};
use crate::backbone::{build, BackboneConfig, FrozenBackbone};
use crate::client::Client;
use crate::data::{partition, Dataset, LocalShard, PartitionSpec, SyntheticTask};
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::parallel;
use crate::seed::sub_seed;
use crate::server::{EvalSet, TrainConfig};
use crate::sidenet::SideNetwork;
use crate::sim::{DeviceProfile, SimClient, SimParams, SimSetup};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Async,
    Sync,
    Both,
    Accounting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: RunMode,
}

fn default_name() -> String {
    "run".into()
}

fn default_mode() -> RunMode {
    RunMode::Async
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            name: default_name(),
            seed: 0,
            mode: default_mode(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    #[serde(default = "d_vocab")]
    pub vocab: usize,
    #[serde(default = "d_classes")]
    pub num_classes: usize,
    #[serde(default = "d_seq")]
    pub seq: usize,
    #[serde(default = "d_signal")]
    pub signal: f64,
    #[serde(default = "d_subset")]
    pub subset_size: usize,
    #[serde(default = "d_train")]
    pub train_samples: usize,
    #[serde(default = "d_eval")]
    pub eval_samples: usize,
}

fn d_vocab() -> usize {
    64
}
fn d_classes() -> usize {
    4
}
fn d_seq() -> usize {
    16
}
fn d_signal() -> f64 {
    0.6
}
fn d_subset() -> usize {
    8
}
fn d_train() -> usize {
    480
}
fn d_eval() -> usize {
    400
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            vocab: d_vocab(),
            num_classes: d_classes(),
            seq: d_seq(),
            signal: d_signal(),
            subset_size: d_subset(),
            train_samples: d_train(),
            eval_samples: d_eval(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    #[serde(default = "d_alpha")]
    pub alpha: f64,
}

fn d_alpha() -> f64 {
    1.0
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection { alpha: d_alpha() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub id: Spanned<String>,
    pub num_layers: usize,
    pub hidden: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_ffn")]
    pub ffn_mult: usize,
    #[serde(default)]
    pub max_seq: Option<usize>,
    #[serde(default)]
    pub init_seed: Option<u64>,
}

fn d_heads() -> usize {
    4
}
fn d_ffn() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSection {
    pub name: Spanned<String>,
    pub tflops: f64,
    pub bandwidth_mbps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSection {
    pub backbone: Spanned<String>,
    pub device: Spanned<String>,
    #[serde(default = "d_count")]
    pub count: usize,
}

fn d_count() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DSideSetting {
    Auto(String),
    Size(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentSection {
    #[serde(default = "d_dside")]
    pub d_side: Spanned<DSideSetting>,
    #[serde(default)]
    pub block_count: Option<usize>,
    #[serde(default = "d_strategy")]
    pub strategy: Spanned<String>,
    #[serde(default)]
    pub taps: Option<Vec<usize>>,
}

fn d_dside() -> Spanned<DSideSetting> {
    Spanned::new(0..0, DSideSetting::Auto("auto".into()))
}

fn d_strategy() -> Spanned<String> {
    Spanned::new(0..0, "uniform".into())
}

impl Default for AlignmentSection {
    fn default() -> Self {
        AlignmentSection {
            d_side: d_dside(),
            block_count: None,
            strategy: d_strategy(),
            taps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_batch")]
    pub minibatch: usize,
    #[serde(default = "d_rank")]
    pub rank: usize,
    #[serde(default = "d_epochs")]
    pub standalone_epochs: usize,
    #[serde(default = "d_k")]
    pub k_arrival: usize,
    #[serde(default = "d_budget")]
    pub replay_budget: usize,
}

fn d_lr() -> f64 {
    5e-4
}
fn d_wd() -> f64 {
    0.01
}
fn d_batch() -> usize {
    8
}
fn d_rank() -> usize {
    4
}
fn d_epochs() -> usize {
    20
}
fn d_k() -> usize {
    1
}
fn d_budget() -> usize {
    4
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: d_lr(),
            weight_decay: d_wd(),
            batch_size: d_batch(),
            minibatch: d_batch(),
            rank: d_rank(),
            standalone_epochs: d_epochs(),
            k_arrival: d_k(),
            replay_budget: d_budget(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSection {
    /// Server throughput as a multiple of the fastest device.
    #[serde(default = "d_mult")]
    pub throughput_mult: f64,
}

fn d_mult() -> f64 {
    100.0
}

impl Default for ServerSection {
    fn default() -> Self {
        ServerSection { throughput_mult: d_mult() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default = "d_interval")]
    pub eval_interval_s: f64,
    #[serde(default = "d_target")]
    pub target_accuracy: f64,
    #[serde(default)]
    pub spill_dir: Option<PathBuf>,
}

fn d_interval() -> f64 {
    0.05
}
fn d_target() -> f64 {
    0.6
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            eval_interval_s: d_interval(),
            target_accuracy: d_target(),
            spill_dir: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccountingSection {
    #[serde(default)]
    pub rounds: Option<usize>,
    #[serde(default)]
    pub samples_per_client: Option<usize>,
    #[serde(default)]
    pub num_clients: Option<usize>,
    #[serde(default)]
    pub perturbations: Option<usize>,
    #[serde(default)]
    pub seq: Option<usize>,
    #[serde(default)]
    pub batch: Option<usize>,
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default)]
    pub elem_bytes: Option<usize>,
    /// Use a configured backbone instead of the RoBERTa-base-shaped preset.
    #[serde(default)]
    pub backbone: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub partition: PartitionSection,
    #[serde(default, rename = "backbone")]
    pub backbones: Vec<BackboneSection>,
    #[serde(default, rename = "device")]
    pub devices: Vec<DeviceSection>,
    #[serde(default, rename = "client")]
    pub clients: Vec<ClientSection>,
    #[serde(default)]
    pub alignment: AlignmentSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub server: ServerSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub accounting: AccountingSection,
}

/// Text of a config file plus its origin, for line-anchored messages.
struct Source<'a> {
    origin: &'a str,
    text: &'a str,
}

impl Source<'_> {
    fn at(&self, span: Range<usize>, msg: impl std::fmt::Display) -> Error {
        if span.is_empty() && span.start == 0 {
            return Error::Config(format!("{}: {msg}", self.origin));
        }
        let before = &self.text[..span.start.min(self.text.len())];
        let line = before.matches('\n').count() + 1;
        let col = before.len() - before.rfind('\n').map(|i| i + 1).unwrap_or(0) + 1;
        Error::Config(format!("{}:{line}:{col}: {msg}", self.origin))
    }
}

impl RunConfig {
    pub fn from_str_named(text: &str, origin: &str) -> Result<Self> {
        let src = Source { origin, text };
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            match e.span() {
                Some(span) => src.at(span, msg),
                None => Error::Config(format!("{origin}: {msg}")),
            }
        })?;
        cfg.validate(&src)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", path.display())))?;
        Self::from_str_named(&text, &path.display().to_string())
    }

    fn validate(&self, src: &Source<'_>) -> Result<()> {
        let mut ids = BTreeSet::new();
        for b in &self.backbones {
            if !ids.insert(b.id.get_ref().as_str()) {
                return Err(src.at(b.id.span(), format!("backbone `{}` defined more than once", b.id.get_ref())));
            }
        }
        let mut devices = BTreeSet::new();
        for d in &self.devices {
            if !devices.insert(d.name.get_ref().as_str()) {
                return Err(src.at(d.name.span(), format!("device `{}` defined more than once", d.name.get_ref())));
            }
            if !(d.tflops > 0.0) || !(d.bandwidth_mbps > 0.0) {
                return Err(src.at(d.name.span(), "tflops and bandwidth_mbps must be positive"));
            }
        }
        for c in &self.clients {
            if !ids.contains(c.backbone.get_ref().as_str()) {
                return Err(src.at(c.backbone.span(), format!("unknown backbone `{}`", c.backbone.get_ref())));
            }
            if !devices.contains(c.device.get_ref().as_str()) {
                return Err(src.at(c.device.span(), format!("unknown device `{}`", c.device.get_ref())));
            }
            if c.count == 0 {
                return Err(src.at(c.backbone.span(), "client count must be at least 1"));
            }
        }
        if let DSideSetting::Auto(s) = self.alignment.d_side.get_ref() {
            if s != "auto" {
                return Err(src.at(self.alignment.d_side.span(), format!("d_side must be \"auto\" or an integer, got \"{s}\"")));
            }
        }
        self.strategy().map_err(|e| src.at(self.alignment.strategy.span(), e))?;
        if self.run.mode != RunMode::Accounting && self.clients.is_empty() {
            return Err(Error::Config(format!("{}: at least one [[client]] is required", src.origin)));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.minibatch == 0 || t.k_arrival == 0 || !(t.lr > 0.0) {
            return Err(Error::Config(format!(
                "{}: batch_size, minibatch, k_arrival and lr must be positive",
                src.origin
            )));
        }
        Ok(())
    }

    fn strategy(&self) -> std::result::Result<LayerStrategy, String> {
        match self.alignment.strategy.get_ref().as_str() {
            "uniform" => Ok(LayerStrategy::Uniform),
            "shallow" => Ok(LayerStrategy::Shallow),
            "deep" => Ok(LayerStrategy::Deep),
            "random" => Ok(LayerStrategy::Random(0)),
            "explicit" => self
                .alignment
                .taps
                .clone()
                .map(LayerStrategy::Explicit)
                .ok_or_else(|| "strategy \"explicit\" needs a `taps` list".to_string()),
            other => Err(format!("unknown strategy \"{other}\"")),
        }
    }

    pub fn d_side_rule(&self) -> DSideRule {
        match self.alignment.d_side.get_ref() {
            DSideSetting::Size(d) => DSideRule::Explicit(*d),
            DSideSetting::Auto(_) => DSideRule::Auto,
        }
    }

    /// Backbone configs with task-derived fields filled in.
    pub fn backbone_configs(&self, seed: u64) -> Vec<BackboneConfig> {
        self.backbones
            .iter()
            .map(|b| {
                let id = b.id.get_ref().clone();
                BackboneConfig {
                    init_seed: b.init_seed.unwrap_or_else(|| sub_seed(seed, &format!("init:backbone:{id}"))),
                    id,
                    num_layers: b.num_layers,
                    hidden: b.hidden,
                    heads: b.heads,
                    ffn_mult: b.ffn_mult,
                    vocab: self.task.vocab,
                    max_seq: b.max_seq.unwrap_or(self.task.seq),
                    num_classes: self.task.num_classes,
                }
            })
            .collect()
    }

    pub fn task(&self, seed: u64) -> SyntheticTask {
        SyntheticTask {
            vocab: self.task.vocab,
            num_classes: self.task.num_classes,
            seq: self.task.seq,
            signal: self.task.signal,
            subset_size: self.task.subset_size,
            seed: sub_seed(seed, "data"),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            opt: AdamW {
                weight_decay: self.train.weight_decay,
                ..AdamW::with_lr(self.train.lr)
            },
            k_arrival: self.train.k_arrival,
            minibatch: self.train.minibatch,
        }
    }

    pub fn accounting_config(&self) -> Result<AccountingConfig> {
        let a = &self.accounting;
        let mut cfg = AccountingConfig::paper_analog();
        if let Some(id) = &a.backbone {
            cfg.backbone = self
                .backbone_configs(self.run.seed)
                .into_iter()
                .find(|b| &b.id == id)
                .ok_or_else(|| Error::Config(format!("accounting backbone `{id}` is not defined")))?;
            cfg.backbone.max_seq = cfg.backbone.max_seq.max(a.seq.unwrap_or(cfg.backbone.max_seq));
        }
        cfg.rounds = a.rounds.unwrap_or(cfg.rounds);
        cfg.samples_per_client = a.samples_per_client.unwrap_or(cfg.samples_per_client);
        cfg.num_clients = a.num_clients.unwrap_or(cfg.num_clients);
        cfg.perturbations = a.perturbations.unwrap_or(cfg.perturbations);
        cfg.seq = a.seq.unwrap_or(cfg.seq);
        cfg.batch = a.batch.unwrap_or(cfg.batch);
        cfg.rank = a.rank.unwrap_or(cfg.rank);
        cfg.elem_bytes = a.elem_bytes.unwrap_or(cfg.elem_bytes);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn num_clients(&self) -> usize {
        self.clients.iter().map(|c| c.count).sum()
    }

    pub fn partition_dataset(&self, train: &Dataset, seed: u64) -> Result<Vec<LocalShard>> {
        partition(
            train,
            &PartitionSpec {
                num_clients: self.num_clients(),
                alpha: self.partition.alpha,
                seed: sub_seed(seed, "partition"),
            },
        )
    }

    /// Training set and its client shards, without building any model.
    pub fn shards(&self, seed: u64) -> Result<Vec<LocalShard>> {
        let train = self.task(seed).generate(self.task.train_samples)?;
        self.partition_dataset(&train, seed)
    }

    /// Builds everything a simulation needs for root seed `seed`.
    pub fn resolve(&self, seed: u64) -> Result<Resolved> {
        let task = self.task(seed);
        let train = task.generate(self.task.train_samples)?;
        let eval = task.generate_with_ids(self.task.eval_samples, self.task.train_samples as u32, sub_seed(seed, "eval"))?;

        let all = self.backbone_configs(seed);
        let used: BTreeSet<&str> = self.clients.iter().map(|c| c.backbone.get_ref().as_str()).collect();
        let configs: Vec<BackboneConfig> = all.into_iter().filter(|c| used.contains(c.id.as_str())).collect();
        let overrides = PlanOverrides {
            block_count: self.alignment.block_count,
            strategy: Some(self.strategy().map_err(Error::Config)?),
        };
        let plan = make_plan_with(&configs, self.d_side_rule(), &overrides)?;
        let built: Vec<Result<FrozenBackbone>> = parallel::map(configs.len(), usize::MAX, |i| build(&configs[i]));
        let mut backbones = BTreeMap::new();
        for b in built {
            let b = b?;
            backbones.insert(b.id().to_string(), Arc::new(b));
        }

        let roster: Vec<(&str, &DeviceSection)> = self
            .clients
            .iter()
            .flat_map(|c| {
                let dev = self
                    .devices
                    .iter()
                    .find(|d| d.name.get_ref() == c.device.get_ref())
                    .expect("validated");
                std::iter::repeat_n((c.backbone.get_ref().as_str(), dev), c.count)
            })
            .collect();
        let shards = self.partition_dataset(&train, seed)?;
        let clients = roster
            .iter()
            .zip(shards)
            .map(|((bid, dev), shard)| SimClient {
                client: Client::new(backbones[*bid].clone(), shard, self.train.batch_size),
                profile: DeviceProfile {
                    name: dev.name.get_ref().clone(),
                    tflops: dev.tflops,
                    bandwidth_mbps: dev.bandwidth_mbps,
                    backbone_id: bid.to_string(),
                },
            })
            .collect::<Vec<_>>();

        let ids: Vec<&String> = backbones.keys().collect();
        let eval_sets = parallel::map(ids.len(), usize::MAX, |i| {
            let b = &backbones[ids[i]];
            EvalSet::build(b, plan.taps(b.id())?, &eval.samples)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        let fastest = clients.iter().map(|c| c.profile.tflops).fold(0.0, f64::max);
        let params = SimParams {
            train: self.train_config(),
            standalone_epochs: self.train.standalone_epochs,
            replay_budget: self.train.replay_budget,
            server_tflops: self.server.throughput_mult * fastest,
            eval_interval_s: self.sim.eval_interval_s,
            target_accuracy: self.sim.target_accuracy,
            seed,
            spill_dir: self.sim.spill_dir.clone(),
        };
        Ok(Resolved {
            seed,
            train,
            eval,
            backbones,
            plan,
            clients,
            eval_sets,
            params,
            rank: self.train.rank,
        })
    }
}

/// A config materialized for one seed.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub seed: u64,
    pub train: Dataset,
    pub eval: Dataset,
    pub backbones: BTreeMap<String, Arc<FrozenBackbone>>,
    pub plan: AlignmentPlan,
    pub clients: Vec<SimClient>,
    pub eval_sets: Vec<EvalSet>,
    pub params: SimParams,
    pub rank: usize,
}

impl Resolved {
    pub fn initial_net(&self) -> Result<SideNetwork> {
        SideNetwork::new(&self.plan, self.rank, sub_seed(self.seed, "init:side"))
    }

    /// Every client, evaluated on every backbone type.
    pub fn setup(&self) -> Result<SimSetup> {
        Ok(SimSetup {
            plan: self.plan.clone(),
            net: self.initial_net()?,
            clients: self.clients.clone(),
            eval_sets: self.eval_sets.clone(),
            params: self.params.clone(),
        })
    }

    /// Only the clients holding `backbone_id`, under the same global plan,
    /// evaluated on that backbone type alone.
    pub fn setup_single(&self, backbone_id: &str) -> Result<SimSetup> {
        let clients: Vec<SimClient> = self
            .clients
            .iter()
            .filter(|c| c.profile.backbone_id == backbone_id)
            .cloned()
            .collect();
        if clients.is_empty() {
            return Err(Error::Identity(backbone_id.to_string()));
        }
        Ok(SimSetup {
            plan: self.plan.clone(),
            net: self.initial_net()?,
            clients,
            eval_sets: self.eval_sets.iter().filter(|s| s.backbone_id == backbone_id).cloned().collect(),
            params: self.params.clone(),
        })
    }

    /// One device alone, evaluated on its backbone type.
    pub fn setup_device(&self, index: usize) -> Result<SimSetup> {
        let client = self
            .clients
            .get(index)
            .cloned()
            .ok_or_else(|| Error::Config(format!("no client at index {index}")))?;
        let id = client.profile.backbone_id.clone();
        Ok(SimSetup {
            plan: self.plan.clone(),
            net: self.initial_net()?,
            clients: vec![client],
            eval_sets: self.eval_sets.iter().filter(|s| s.backbone_id == id).cloned().collect(),
            params: self.params.clone(),
        })
    }

    /// Same shards, with every device of the named profile slowed down.
    pub fn with_profiles(&self, f: impl Fn(&DeviceProfile) -> DeviceProfile) -> Resolved {
        let mut out = self.clone();
        for c in &mut out.clients {
            c.profile = f(&c.profile);
        }
        let fastest = self.clients.iter().map(|c| c.profile.tflops).fold(0.0, f64::max);
        out.params.server_tflops = self.params.server_tflops / fastest.max(f64::MIN_POSITIVE)
            * out.clients.iter().map(|c| c.profile.tflops).fold(0.0, f64::max);
        out
    }

    pub fn shards(&self) -> Vec<&LocalShard> {
        self.clients.iter().map(|c| &c.client.shard).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINI: &str = r#"
[run]
seed = 3

[task]
train_samples = 64
eval_samples = 32

[[backbone]]
id = "s"
num_layers = 2
hidden = 16

[[device]]
name = "fast"
tflops = 1.0
bandwidth_mbps = 50.0

[[client]]
backbone = "s"
device = "fast"
count = 2
"#;

    #[test]
    fn parses_and_resolves() {
        let cfg = RunConfig::from_str_named(MINI, "mini.toml").unwrap();
        let r = cfg.resolve(3).unwrap();
        assert_eq!(r.clients.len(), 2);
        assert_eq!(r.plan.block_count, 2);
        assert_eq!(r.eval_sets.len(), 1);
        assert_eq!(r.params.server_tflops, 100.0);
    }

    #[test]
    fn unknown_backbone_reports_line() {
        let bad = MINI.replace("backbone = \"s\"", "backbone = \"nope\"");
        let err = RunConfig::from_str_named(&bad, "bad.toml").unwrap_err().to_string();
        assert!(err.contains("bad.toml:20:"), "{err}");
        assert!(err.contains("unknown backbone `nope`"), "{err}");
    }

    #[test]
    fn syntax_error_reports_line() {
        let bad = MINI.replace("tflops = 1.0", "tflops = = 1.0");
        let err = RunConfig::from_str_named(&bad, "bad.toml").unwrap_err().to_string();
        assert!(err.contains("bad.toml:16:"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let bad = MINI.replace("[run]\n", "[run]\nsede = 1\n");
        assert!(matches!(RunConfig::from_str_named(&bad, "x"), Err(Error::Config(_))));
    }

    #[test]
    fn defaults_follow_reference_hyperparameters() {
        let cfg = RunConfig::from_str_named(MINI, "mini.toml").unwrap();
        assert_eq!(cfg.train.lr, 5e-4);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.standalone_epochs, 20);
        let acc = cfg.accounting_config().unwrap();
        assert_eq!((acc.batch, acc.seq), (8, 256));
        assert_eq!(acc.backbone.num_layers, 12);
    }
}
