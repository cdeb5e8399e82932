//! `fedside` command-line driver: simulation runs, cost tables, partition
//! inspection and gradient self-checks.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedside::accounting::{cost_model_baselines, AccountingConfig};
use fedside::backbone::BackboneConfig;
use fedside::config::{Resolved, RunConfig, RunMode};
use fedside::data::{heterogeneity, histogram};
use fedside::gradcheck::run_suite;
use fedside::sidenet::write_checkpoint;
use fedside::sim::{run_mode, SimMode, SimOutput};
use fedside::Error;
use serde::Serialize;

/// Environment variable that overrides `--out-dir`.
const OUT_DIR_ENV: &str = "FEDSIDE_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "fedside", version, about = "Federated side-tuning simulator")]
struct Cli {
    /// Root seed; overrides `[run] seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for run artifacts.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    /// Run this many consecutive seeds in parallel, one subdirectory each.
    #[arg(long, global = true)]
    sweep: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a config and write metrics, events, curve and checkpoint.
    Run { config: PathBuf },
    /// Print the per-device cost table; without a config, the reference preset.
    Account { config: Option<PathBuf> },
    /// Print per-client label histograms and heterogeneity statistics.
    Partition { config: PathBuf },
    /// Run the gradient suite against finite differences.
    Gradcheck,
}

/// Failure carrying the process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Plan(_) | Error::Partition(_) => 2,
            Error::Numeric(_) => 3,
            Error::Io(_) => 1,
            _ => 4,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 1,
        message: format!("cannot write `{}`: {e}", path.display()),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("fedside: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn out_dir(cli: &Cli) -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| cli.out_dir.clone())
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Run { config } => {
            let cfg = RunConfig::load(config)?;
            let seed = cli.seed.unwrap_or(cfg.run.seed);
            let out = out_dir(cli);
            match cli.sweep {
                Some(n) if n > 1 => sweep(&cfg, seed, n, &out),
                _ => run_one(&cfg, seed, &out).map(|summary| println!("{summary}")),
            }
        }
        Command::Account { config } => {
            let acc = match config {
                Some(path) => RunConfig::load(path)?.accounting_config()?,
                None => AccountingConfig::paper_analog(),
            };
            account(&acc, &out_dir(cli))
        }
        Command::Partition { config } => {
            let cfg = RunConfig::load(config)?;
            partition(&cfg, cli.seed.unwrap_or(cfg.run.seed))
        }
        Command::Gradcheck => gradcheck(cli.seed.unwrap_or(0)),
    }
}

fn sweep(cfg: &RunConfig, first: u64, n: u64, out: &Path) -> CliResult<()> {
    let seeds: Vec<u64> = (first..first + n).collect();
    let run = |s: &u64| run_one(cfg, *s, &out.join(format!("seed-{s}")));
    #[cfg(feature = "parallel")]
    let results: Vec<CliResult<String>> = {
        use rayon::prelude::*;
        seeds.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<CliResult<String>> = seeds.iter().map(run).collect();
    let mut first_err = None;
    for r in results {
        match r {
            Ok(summary) => println!("{summary}"),
            Err(f) => {
                eprintln!("fedside: {}", f.message);
                first_err.get_or_insert(f);
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

/// Resolved inputs embedded in every artifact.
#[derive(Serialize)]
struct RunRecord<'a> {
    seed: u64,
    config: &'a RunConfig,
    backbones: Vec<BackboneConfig>,
    plan: &'a fedside::alignment::AlignmentPlan,
    plan_digest: String,
    params: &'a fedside::sim::SimParams,
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    run: &'a RunRecord<'a>,
    metrics: &'a fedside::sim::RunMetrics,
}

fn modes(mode: RunMode) -> CliResult<Vec<SimMode>> {
    match mode {
        RunMode::Async => Ok(vec![SimMode::Async]),
        RunMode::Sync => Ok(vec![SimMode::Sync]),
        RunMode::Both => Ok(vec![SimMode::Async, SimMode::Sync]),
        RunMode::Accounting => Err(Failure {
            code: 2,
            message: "mode \"accounting\" has nothing to simulate; use `fedside account`".into(),
        }),
    }
}

fn run_one(cfg: &RunConfig, seed: u64, out: &Path) -> CliResult<String> {
    let modes = modes(cfg.run.mode)?;
    let mut resolved: Resolved = cfg.resolve(seed)?;
    if let Some(dir) = &cfg.sim.spill_dir {
        resolved.params.spill_dir = Some(out.join(dir));
    }
    let record = RunRecord {
        seed,
        config: cfg,
        backbones: resolved.backbones.values().map(|b| b.config().clone()).collect(),
        plan: &resolved.plan,
        plan_digest: resolved.plan.digest_hex(),
        params: &resolved.params,
    };
    let mut summary = Vec::new();
    for mode in &modes {
        let dir = if modes.len() > 1 {
            out.join(mode_name(*mode))
        } else {
            out.to_path_buf()
        };
        if let Some(spill) = &resolved.params.spill_dir {
            fs::create_dir_all(spill).map_err(|e| io_failure(spill, e))?;
        }
        let setup = resolved.setup()?;
        let output = run_mode(&setup, *mode)?;
        write_artifacts(&dir, &record, &output)?;
        let m = &output.metrics;
        summary.push(format!(
            "{} seed {seed}: final accuracy {:.4}, time to {:.2} {}, end {:.4} s, {} packets -> {}",
            mode_name(*mode),
            m.final_eval.global,
            m.target_accuracy,
            m.time_to_target.map_or("not reached".to_string(), |t| format!("{t:.4} s")),
            m.server.end_time,
            m.totals.packets,
            dir.display()
        ));
    }
    Ok(summary.join("\n"))
}

fn mode_name(mode: SimMode) -> &'static str {
    match mode {
        SimMode::Async => "async",
        SimMode::Sync => "sync",
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| io_failure(path, e))
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("artifact types serialize")
}

fn write_artifacts(dir: &Path, record: &RunRecord<'_>, output: &SimOutput) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;

    let metrics = MetricsFile {
        run: record,
        metrics: &output.metrics,
    };
    let mut text = serde_json::to_string_pretty(&metrics).expect("artifact types serialize");
    text.push('\n');
    write_file(&dir.join("metrics.json"), text.as_bytes())?;

    let mut events = String::new();
    events.push_str(&json(&serde_json::json!({ "event": "run", "run": record })));
    events.push('\n');
    for e in &output.events {
        events.push_str(&json(e));
        events.push('\n');
    }
    write_file(&dir.join("events.jsonl"), events.as_bytes())?;

    let mut curve = String::from("sim_time_s,accuracy,phase\n");
    for p in &output.metrics.curve {
        let phase = json(&p.phase);
        curve.push_str(&format!("{},{},{}\n", p.t, p.accuracy, phase.trim_matches('"')));
    }
    write_file(&dir.join("curve.csv"), curve.as_bytes())?;

    let path = dir.join("checkpoint.bin");
    let mut file = fs::File::create(&path).map_err(|e| io_failure(&path, e))?;
    write_checkpoint(&mut file, &output.net, &json(record))?;
    file.flush().map_err(|e| io_failure(&path, e))
}

fn account(acc: &AccountingConfig, out: &Path) -> CliResult<()> {
    let table = cost_model_baselines(acc)?;
    print!("{}", table.to_text());
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let path = out.join("account.csv");
    write_file(&path, table.to_csv().as_bytes())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn partition(cfg: &RunConfig, seed: u64) -> CliResult<()> {
    let shards = cfg.shards(seed)?;
    let c = cfg.task.num_classes;
    println!("seed {seed}, alpha {}, {} clients, {} classes", cfg.partition.alpha, shards.len(), c);
    for s in &shards {
        let h = histogram(&s.samples, c);
        let shares: Vec<String> = h.iter().map(|&k| format!("{:.3}", k as f64 / s.len() as f64)).collect();
        println!("client {:>3}: n={:<5} counts {:?} shares [{}]", s.client_id, s.len(), h, shares.join(", "));
    }
    let stats = heterogeneity(&shards, c);
    println!(
        "mean total-variation to global: {:.4}\nmean max label share: {:.4}",
        stats.mean_tv, stats.mean_max_share
    );
    Ok(())
}

fn gradcheck(seed: u64) -> CliResult<()> {
    const TOLERANCE: f64 = 1e-5;
    let reports = run_suite(seed)?;
    let mut worst: f64 = 0.0;
    for r in &reports {
        println!("{:<24} max rel error {:.3e}", r.name, r.max_rel_error);
        worst = worst.max(r.max_rel_error);
    }
    println!("max relative error: {worst:.3e}");
    if worst < TOLERANCE {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            message: format!("gradient check failed: {worst:.3e} >= {TOLERANCE:e}"),
        })
    }
}
