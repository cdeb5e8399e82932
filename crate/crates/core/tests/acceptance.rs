//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! Failures are reported, not hidden: the process exits non-zero on any
//! FAIL when `FEDSIDE_ACCEPTANCE_STRICT=1`; otherwise it exits zero so the
//! rest of the workspace suite still runs and the lines stay visible.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use fedside::accounting::{cost_model_baselines, AccountingConfig};
use fedside::client::process_batch;
use fedside::config::{Resolved, RunConfig};
use fedside::experiments::{
    bundled, d_side_sweep, global_accuracy, global_vs_single, layer_selection, memorization, straggler, with_alpha,
    MEMORIZATION_LR,
};
use fedside::gradcheck::run_suite;
use fedside::seed;
use fedside::server::{ActivationCache, Server, TrainConfig};
use fedside::sidenet::{compute_deviation, corrected_argmax, residual_loss};
use fedside::sim::{simulate, simulate_sync_baseline};
use fedside::tensor::{self, Tensor};
use fedside::wire::ActivationPacket;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances pinned from the criteria.
const COMPUTE_REDUCTION_MIN: f64 = 0.952;
const COMM_REDUCTION_MIN: f64 = 0.932;
const SFL_OVER_OURS_MIN: f64 = 100.0;
const ACCOUNTING_RUNTIME: Duration = Duration::from_secs(10);
const SYNC_MIXED_BAND: f64 = 0.10;
const MIXED_SPEEDUP_MIN: f64 = 5.0;
const STRAGGLER_SLOWDOWN: f64 = 10.0;
const STRAGGLER_RUNTIME_PER_RUN: Duration = Duration::from_secs(120);
const GLOBAL_MARGIN_MIN: f64 = 0.02;
const GLOBAL_RUNTIME: Duration = Duration::from_secs(600);
const SKEW_ALPHA: f64 = 0.1;
const IID_ALPHA: f64 = 1e6;
const SKEW_BAND: f64 = 0.03;
const LAYER_BAND: f64 = 0.005;
const GRAD_TOLERANCE: f64 = 1e-5;
const MEMO_RUNTIME: Duration = Duration::from_secs(30);
const SEEDS: u64 = 5;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn accounting() -> Verdict {
    let t0 = Instant::now();
    let table = cost_model_baselines(&AccountingConfig::paper_analog()).expect("preset is valid");
    let elapsed = t0.elapsed();
    let compute = table.compute_reduction_vs_fl;
    let comm = table.comm_reduction_vs_best_baseline;
    let sfl = table.sfl_comm_over_ours;
    verdict(
        compute >= COMPUTE_REDUCTION_MIN && comm >= COMM_REDUCTION_MIN && sfl >= SFL_OVER_OURS_MIN && elapsed < ACCOUNTING_RUNTIME,
        format!(
            "compute reduction {:.2}% (>= {:.1}%), comm reduction {:.2}% (>= {:.1}%), SFL/ours comm {:.1}x (>= {SFL_OVER_OURS_MIN}x), {elapsed:.2?}",
            100.0 * compute,
            100.0 * COMPUTE_REDUCTION_MIN,
            100.0 * comm,
            100.0 * COMM_REDUCTION_MIN,
            sfl
        ),
    )
}

fn stragglers(checksums: &mut Vec<(String, u64, Arc<fedside::backbone::FrozenBackbone>)>) -> Verdict {
    let base = bundled("straggler").expect("bundled").resolve(0).expect("resolves");
    track(checksums, &base);
    let mut speedups = Vec::new();
    let mut main = None;
    let mut slowest_run = Duration::ZERO;
    for factor in [1.0, 4.0, STRAGGLER_SLOWDOWN] {
        let t0 = Instant::now();
        let rep = straggler(&base, factor).expect("straggler runs");
        // Six simulations per report.
        slowest_run = slowest_run.max(t0.elapsed() / 6);
        speedups.push(rep.mixed_speedup());
        if factor == STRAGGLER_SLOWDOWN {
            main = Some(rep);
        }
    }
    let rep = main.expect("main slowdown simulated");
    let spread = rep.async_spread();
    let pass_time = rep.slowest_pass();
    let ratio = rep.sync_mixed_over_slow();
    let speedup = rep.mixed_speedup();
    let monotone = speedups.windows(2).all(|w| matches!((w[0], w[1]), (Some(a), Some(b)) if b >= a));
    let pass = spread.is_some_and(|s| s <= pass_time)
        && ratio.is_some_and(|r| (r - 1.0).abs() <= SYNC_MIXED_BAND)
        && speedup.is_some_and(|s| s >= MIXED_SPEEDUP_MIN)
        && monotone
        && slowest_run < STRAGGLER_RUNTIME_PER_RUN;
    let fmt = |x: Option<f64>| x.map_or("unreached".to_string(), |v| format!("{v:.3}"));
    verdict(
        pass,
        format!(
            "async spread {} s <= slowest pass {:.3} s; sync mixed/all-slow {} (within {SYNC_MIXED_BAND}); mixed speedup {}x at {STRAGGLER_SLOWDOWN}x (>= {MIXED_SPEEDUP_MIN}); speedups over 1/4/10x [{}] monotone {monotone}; slowest run {slowest_run:.2?}",
            fmt(spread),
            pass_time,
            fmt(ratio),
            fmt(speedup),
            speedups.iter().map(|s| fmt(*s)).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn global_single() -> Verdict {
    let cfg = with_alpha(&bundled("hetero").expect("bundled"), SKEW_ALPHA);
    let t0 = Instant::now();
    let runs: Vec<_> = (0..SEEDS).map(|s| global_vs_single(&cfg, s).expect("runs")).collect();
    let elapsed = t0.elapsed();
    let global = mean(runs.iter().map(|r| r.global.global));
    let single = mean(runs.iter().map(|r| r.mean_single()));
    let largest = cfg
        .backbone_configs(0)
        .into_iter()
        .max_by_key(|b| b.num_params())
        .expect("backbones")
        .id;
    let g_large = mean(runs.iter().map(|r| r.global.per_backbone[&largest]));
    let s_large = mean(runs.iter().map(|r| r.single[&largest]));
    verdict(
        global - single >= GLOBAL_MARGIN_MIN && g_large >= s_large && elapsed < GLOBAL_RUNTIME,
        format!(
            "alpha {SKEW_ALPHA}, {SEEDS} seeds: global {:.2}% vs mean single {:.2}% (margin {:.2} >= {:.0} points); `{largest}` global {:.2}% vs single {:.2}%; {elapsed:.1?}",
            100.0 * global,
            100.0 * single,
            100.0 * (global - single),
            100.0 * GLOBAL_MARGIN_MIN,
            100.0 * g_large,
            100.0 * s_large
        ),
    )
}

fn label_skew() -> Verdict {
    let cfg = bundled("homogeneous").expect("bundled");
    let skew = mean((0..SEEDS).map(|s| global_accuracy(&with_alpha(&cfg, SKEW_ALPHA), s).expect("runs")));
    let iid = mean((0..SEEDS).map(|s| global_accuracy(&with_alpha(&cfg, IID_ALPHA), s).expect("runs")));
    verdict(
        (skew - iid).abs() <= SKEW_BAND,
        format!(
            "{SEEDS} seeds: alpha {SKEW_ALPHA} {:.2}% vs IID {:.2}% (|diff| {:.2} <= {:.0} points)",
            100.0 * skew,
            100.0 * iid,
            100.0 * (skew - iid).abs(),
            100.0 * SKEW_BAND
        ),
    )
}

fn alignment_ablations() -> Verdict {
    let cfg = bundled("single").expect("bundled");
    let runs: Vec<_> = (0..SEEDS).map(|s| layer_selection(&cfg, s).expect("runs")).collect();
    let uniform = mean(runs.iter().map(|r| r.uniform));
    let importance = mean(runs.iter().map(|r| r.importance));
    let layers_ok = (uniform - importance).abs() <= LAYER_BAND;

    let native = cfg.backbones[0].hidden;
    let sizes = [native / 4, native, native * 4];
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for s in 0..SEEDS {
        for (d, a) in d_side_sweep(&cfg, &sizes, s).expect("runs") {
            *acc.entry(d).or_default() += a / SEEDS as f64;
        }
    }
    let width_ok = acc.values().all(|&a| acc[&native] >= a);
    let picks: Vec<String> = runs.iter().map(|r| format!("{:?}", r.importance_taps)).collect();
    verdict(
        layers_ok && width_ok,
        format!(
            "{SEEDS} seeds, B={}: uniform {:?} {:.2}% vs importance {:.2}% (|diff| {:.2} <= {:.1} points; picks {}); d_side {}",
            runs[0].block_count,
            runs[0].uniform_taps,
            100.0 * uniform,
            100.0 * importance,
            100.0 * (uniform - importance).abs(),
            100.0 * LAYER_BAND,
            picks.join(" "),
            acc.iter()
                .map(|(d, a)| format!("{d}{}: {:.2}%", if *d == native { " (native)" } else { "" }, 100.0 * a))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn track(list: &mut Vec<(String, u64, Arc<fedside::backbone::FrozenBackbone>)>, r: &Resolved) {
    for (id, b) in &r.backbones {
        list.push((id.clone(), b.checksum(), b.clone()));
    }
}

fn numeric(checksums: &[(String, u64, Arc<fedside::backbone::FrozenBackbone>)]) -> Verdict {
    let reports = run_suite(0).expect("suite runs");
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);

    let frozen = checksums.iter().all(|(_, before, b)| b.checksum() == *before);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = Tensor::from_fn(&[64, 5], |_| rng.random_range(-6.0..6.0));
    let labels: Vec<usize> = (0..64).map(|_| rng.random_range(0..5)).collect();
    let dev = compute_deviation(&logits, &labels).expect("valid labels");
    let s = tensor::scale(&dev, -1.0);
    let loss = residual_loss(&s, &dev).expect("same shape");
    let pred = corrected_argmax(&logits, &s).expect("same shape");
    let identity = loss == 0.0 && pred == labels;
    verdict(
        worst < GRAD_TOLERANCE && frozen && identity,
        format!(
            "gradient suite max rel error {worst:.2e} (< {GRAD_TOLERANCE:e}) over {} checks; {} backbones unchanged after every run: {frozen}; residual identity loss {loss} and {}/64 correct",
            reports.len(),
            checksums.len(),
            pred.iter().zip(&labels).filter(|(p, l)| p == l).count()
        ),
    )
}

fn protocol(checksums: &mut Vec<(String, u64, Arc<fedside::backbone::FrozenBackbone>)>) -> Verdict {
    let cfg: RunConfig = bundled("hetero").expect("bundled");
    let r = cfg.resolve(0).expect("resolves");
    track(checksums, &r);

    // Single pass: every sample id in exactly one packet.
    let mut packets: Vec<ActivationPacket> = Vec::new();
    for c in &r.clients {
        let mut shard = c.client.shard.clone();
        while !shard.is_exhausted() {
            packets.push(process_batch(&c.client.backbone, &r.plan, &mut shard, c.client.batch_size).expect("batch"));
        }
    }
    let mut ids: Vec<u32> = packets.iter().flat_map(|p| p.sample_ids.iter().copied()).collect();
    ids.sort_unstable();
    let mut want: Vec<u32> = r.train.samples.iter().map(|s| s.id).collect();
    want.sort_unstable();
    let single_pass = ids == want;

    // Cache conservation and arrival-order independence.
    let fill = |order: &[usize]| {
        let mut cache = ActivationCache::new(seed::rng(0, "cache"));
        for &i in order {
            cache.insert(Arc::new(packets[i].clone()), 0.0).expect("insert");
        }
        let mut s = Server::new(r.initial_net().expect("net"), cache, TrainConfig::default(), [], seed::rng(0, "replay"));
        s.standalone_tune(1, 0.0).expect("tunes");
        let mut multiset: Vec<Vec<u8>> = s.cache().records().iter().map(|rec| rec.packet.encode()).collect();
        multiset.sort();
        (s.cache().num_samples(), s.cache().len(), multiset, s.net().params().checksum())
    };
    let fwd: Vec<usize> = (0..packets.len()).collect();
    let mut shuffled = fwd.clone();
    shuffled.sort_by_key(|&i| seed::sub_seed(i as u64, "order"));
    let a = fill(&fwd);
    let b = fill(&shuffled);
    let conserved = a.0 == want.len() && a.1 == packets.len();
    let order_free = a == b;

    // Determinism of the full simulation, byte for byte.
    let run = || {
        let setup = r.setup().expect("setup");
        let out = simulate(&setup).expect("sim");
        let sync = simulate_sync_baseline(&setup).expect("sync");
        (
            serde_json::to_vec(&out.metrics).expect("json"),
            serde_json::to_vec(&out.events).expect("json"),
            serde_json::to_vec(&sync.metrics).expect("json"),
        )
    };
    let first = run();
    let deterministic = first == run();
    let sim_conserved = {
        let m: serde_json::Value = serde_json::from_slice(&first.0).expect("json");
        m["totals"]["packets"] == packets.len() && m["server"]["arrival_steps"] == packets.len()
    };
    verdict(
        single_pass && conserved && order_free && deterministic && sim_conserved,
        format!(
            "single pass over {} samples in {} packets: {single_pass}; cache holds {} samples / {} records: {conserved}; arrival order independent: {order_free}; simulate byte-identical on rerun: {deterministic}; simulated arrivals equal packets: {sim_conserved}",
            want.len(),
            packets.len(),
            a.0,
            a.1
        ),
    )
}

fn memorize() -> Verdict {
    let t0 = Instant::now();
    let r = memorization(0, 20, MEMORIZATION_LR).expect("runs");
    let elapsed = t0.elapsed();
    verdict(
        r.corrected_accuracy == 1.0 && elapsed < MEMO_RUNTIME,
        format!(
            "{} samples, {} standalone epochs ({} steps, lr {MEMORIZATION_LR}): training accuracy {:.1}% (backbone alone {:.1}%), cache loss {:.4} -> {:.4}, {elapsed:.2?}",
            r.samples,
            r.epochs,
            r.steps,
            100.0 * r.corrected_accuracy,
            100.0 * r.backbone_accuracy,
            r.initial_loss,
            r.final_loss
        ),
    )
}

fn main() {
    // The libtest flags cargo passes are irrelevant here.
    let only: Option<usize> = std::env::var("FEDSIDE_ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let strict = std::env::var("FEDSIDE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut checksums = Vec::new();
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Verdict| {
        if only.is_some_and(|o| o != n) {
            return;
        }
        let t0 = Instant::now();
        let v = f();
        let status = if v.pass { "PASS" } else { "FAIL" };
        if !v.pass {
            failed += 1;
        }
        println!("criterion {n} {status} [{name}] {} ({:.1?})", v.detail, t0.elapsed());
    };
    report(1, "accounting ratios", &mut accounting);
    report(2, "straggler resilience", &mut || stragglers(&mut checksums));
    report(3, "global vs single", &mut global_single);
    report(4, "label-skew robustness", &mut label_skew);
    report(5, "alignment ablations", &mut alignment_ablations);
    report(7, "protocol properties", &mut || protocol(&mut checksums));
    report(6, "numeric correctness", &mut || numeric(&checksums));
    report(8, "memorization", &mut memorize);
    println!("acceptance: {failed} criteria failed");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
