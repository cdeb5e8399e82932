//! Closed-form per-device cost models for the side-tuning protocol and the
//! federated baselines it is compared against. Nothing here trains.

use serde::{Deserialize, Serialize};

use crate::alignment::{make_plan, DSideRule};
use crate::backbone::BackboneConfig;
use crate::client::{batch_sizes, client_cost};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccountingConfig {
    pub backbone: BackboneConfig,
    pub seq: usize,
    pub batch: usize,
    pub rank: usize,
    /// Training rounds of the round-based baselines.
    pub rounds: usize,
    pub num_clients: usize,
    pub samples_per_client: usize,
    /// Bytes per parameter/activation value on device and on the wire.
    pub elem_bytes: usize,
    /// Attention matrices carrying LoRA adapters per layer (e.g. q and v).
    pub lora_targets: usize,
    /// Forward-gradient perturbations per iteration, shared across clients.
    pub perturbations: usize,
    /// Layers kept on device by split learning (first and last).
    pub sfl_device_layers: usize,
}

impl AccountingConfig {
    /// RoBERTa-base-shaped preset: 12 layers, hidden 768, seq 256, batch 8,
    /// rank 64, 100 rounds over 100 clients, 16-bit values.
    pub fn paper_analog() -> Self {
        AccountingConfig {
            backbone: BackboneConfig {
                id: "roberta-base".into(),
                num_layers: 12,
                hidden: 768,
                heads: 12,
                ffn_mult: 4,
                vocab: 50265,
                max_seq: 512,
                num_classes: 2,
                init_seed: 0,
            },
            seq: 256,
            batch: 8,
            rank: 64,
            rounds: 100,
            num_clients: 100,
            // 3668 training pairs split over 100 devices.
            samples_per_client: 37,
            elem_bytes: 2,
            lora_targets: 2,
            perturbations: 300,
            sfl_device_layers: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.seq == 0 || self.seq > self.backbone.max_seq {
            return Err(Error::Config(format!("seq {} outside [1, max_seq]", self.seq)));
        }
        if self.batch == 0 || self.rank == 0 || self.elem_bytes == 0 || self.num_clients == 0 {
            return Err(Error::Config("batch, rank, elem_bytes and num_clients must be positive".into()));
        }
        if self.sfl_device_layers > self.backbone.num_layers {
            return Err(Error::Config("sfl_device_layers exceeds num_layers".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub method: String,
    pub memory_bytes: f64,
    pub compute_flops: f64,
    pub comm_bytes: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccountingTable {
    pub rows: Vec<CostRow>,
    pub compute_reduction_vs_fl: f64,
    pub comm_reduction_vs_best_baseline: f64,
    pub sfl_comm_over_ours: f64,
}

pub const ROW_FL: &str = "FL-LoRA";
pub const ROW_SFL: &str = "SFL-LoRA";
pub const ROW_FWD: &str = "FwdLLM";
pub const ROW_OURS: &str = "Side-Tuning";

impl AccountingTable {
    pub fn row(&self, method: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,memory_bytes,compute_flops,comm_bytes\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.method, r.memory_bytes, r.compute_flops, r.comm_bytes));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<12} {:>14} {:>14} {:>14}\n",
            "method", "memory (MB)", "compute (TF)", "comm (MB)"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<12} {:>14.1} {:>14.2} {:>14.1}\n",
                r.method,
                r.memory_bytes / 1e6,
                r.compute_flops / 1e12,
                r.comm_bytes / 1e6
            ));
        }
        s.push_str(&format!(
            "compute reduction vs {ROW_FL}: {:.2}%\ncomm reduction vs best baseline: {:.2}%\n{ROW_SFL} comm / ours: {:.1}x\n",
            100.0 * self.compute_reduction_vs_fl,
            100.0 * self.comm_reduction_vs_best_baseline,
            self.sfl_comm_over_ours
        ));
        s
    }
}

/// Parameters of one transformer layer.
fn layer_params(cfg: &BackboneConfig) -> f64 {
    let h = cfg.hidden as f64;
    let f = (cfg.ffn_mult * cfg.hidden) as f64;
    4.0 * (h * h + h) + 2.0 * h * f + f + h + 4.0 * h
}

/// Forward FLOPs of one transformer layer for one sample.
fn layer_flops(cfg: &BackboneConfig, seq: usize) -> f64 {
    let with = |l: usize| BackboneConfig { num_layers: l, ..cfg.clone() }.forward_flops(seq, 1);
    with(2) - with(1)
}

pub fn cost_model_baselines(cfg: &AccountingConfig) -> Result<AccountingTable> {
    cfg.validate()?;
    let bb = &cfg.backbone;
    let eb = cfg.elem_bytes as f64;
    let rounds = cfg.rounds as f64;
    let n = cfg.samples_per_client as f64;
    let (s, h, r) = (cfg.seq as f64, bb.hidden as f64, cfg.rank as f64);
    let fwd_sample = bb.forward_flops(cfg.seq, 1);
    let params = bb.num_params() as f64;
    let lora = bb.num_layers as f64 * cfg.lora_targets as f64 * 2.0 * h * r;
    let live = (cfg.batch * bb.live_activation_elems(cfg.seq)) as f64;
    // Per-layer activations kept for backward: the live set of each layer.
    let retained = bb.num_layers as f64 * live;

    // Adapter weights, gradients and two optimizer moments.
    let lora_train_state = 4.0 * lora;
    let fl = CostRow {
        method: ROW_FL.into(),
        memory_bytes: (params + lora_train_state + retained) * eb,
        compute_flops: 3.0 * fwd_sample * n * rounds,
        comm_bytes: 2.0 * lora * eb * rounds,
    };

    let dev_layers = cfg.sfl_device_layers as f64;
    let dev_lora = dev_layers * cfg.lora_targets as f64 * 2.0 * h * r;
    let embed_params = ((bb.vocab + bb.max_seq) * bb.hidden) as f64;
    // Two cut points, each crossed by activations up and gradients down.
    let cut_bytes_per_sample = 4.0 * s * h * eb;
    let sfl = CostRow {
        method: ROW_SFL.into(),
        memory_bytes: (embed_params + dev_layers * layer_params(bb) + 4.0 * dev_lora + dev_layers * live) * eb,
        compute_flops: 3.0 * dev_layers * layer_flops(bb, cfg.seq) * n * rounds,
        comm_bytes: (cut_bytes_per_sample * n + 2.0 * dev_lora * eb) * rounds,
    };

    // Each client evaluates its share of the perturbations plus the clean pass.
    let fwd_mult = 1.0 + cfg.perturbations as f64 / cfg.num_clients as f64;
    let fwd = CostRow {
        method: ROW_FWD.into(),
        memory_bytes: (params + 3.0 * lora + live) * eb,
        compute_flops: fwd_mult * fwd_sample * n * rounds,
        comm_bytes: 2.0 * lora * eb * rounds,
    };

    let plan = make_plan(std::slice::from_ref(bb), DSideRule::Auto)?;
    let ours_cost = client_cost(bb, &plan, cfg.samples_per_client, cfg.batch, cfg.seq, cfg.elem_bytes);
    debug_assert_eq!(ours_cost.num_batches, batch_sizes(cfg.samples_per_client, cfg.batch).count());
    let ours = CostRow {
        method: ROW_OURS.into(),
        memory_bytes: ours_cost.peak_mem_bytes as f64,
        compute_flops: ours_cost.flops,
        comm_bytes: ours_cost.upload_bytes as f64,
    };

    let mut rows = vec![fl, sfl, fwd, ours];
    if cfg.rounds == 0 {
        for row in &mut rows {
            row.memory_bytes = 0.0;
            row.compute_flops = 0.0;
            row.comm_bytes = 0.0;
        }
    }
    let ratio = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let best_comm = rows[..3].iter().map(|r| r.comm_bytes).fold(f64::INFINITY, f64::min);
    Ok(AccountingTable {
        compute_reduction_vs_fl: 1.0 - ratio(rows[3].compute_flops, rows[0].compute_flops),
        comm_reduction_vs_best_baseline: 1.0 - ratio(rows[3].comm_bytes, best_comm),
        sfl_comm_over_ours: ratio(rows[1].comm_bytes, rows[3].comm_bytes),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_flops_is_one_layer_increment() {
        let cfg = AccountingConfig::paper_analog();
        let bb = &cfg.backbone;
        let l1 = BackboneConfig { num_layers: 1, ..bb.clone() }.forward_flops(256, 1);
        let l2 = BackboneConfig { num_layers: 2, ..bb.clone() }.forward_flops(256, 1);
        assert!((layer_flops(bb, 256) - (l2 - l1)).abs() < 1.0);
    }

    #[test]
    fn layer_params_consistent_with_backbone_count() {
        let bb = AccountingConfig::paper_analog().backbone;
        let one = BackboneConfig { num_layers: 1, ..bb.clone() }.num_params() as f64;
        let two = BackboneConfig { num_layers: 2, ..bb }.num_params() as f64;
        assert_eq!(layer_params(&AccountingConfig::paper_analog().backbone), two - one);
    }

    #[test]
    fn ours_compute_is_forward_only() {
        let cfg = AccountingConfig::paper_analog();
        let t = cost_model_baselines(&cfg).unwrap();
        let ours = t.row(ROW_OURS).unwrap();
        let want = cfg.backbone.forward_flops(cfg.seq, cfg.samples_per_client);
        assert!((ours.compute_flops - want).abs() / want < 1e-12);
    }

    #[test]
    fn fwd_exceeds_fl_compute_at_300_perturbations() {
        let t = cost_model_baselines(&AccountingConfig::paper_analog()).unwrap();
        assert!(t.row(ROW_FWD).unwrap().compute_flops > t.row(ROW_FL).unwrap().compute_flops);
    }

    #[test]
    fn ours_is_minimal_in_compute() {
        let t = cost_model_baselines(&AccountingConfig::paper_analog()).unwrap();
        let ours = t.row(ROW_OURS).unwrap().compute_flops;
        assert!(t.rows.iter().all(|r| r.compute_flops >= ours));
    }

    #[test]
    fn zero_rounds_zero_costs() {
        let cfg = AccountingConfig {
            rounds: 0,
            ..AccountingConfig::paper_analog()
        };
        let t = cost_model_baselines(&cfg).unwrap();
        assert!(t
            .rows
            .iter()
            .all(|r| r.memory_bytes == 0.0 && r.compute_flops == 0.0 && r.comm_bytes == 0.0));
    }
}
