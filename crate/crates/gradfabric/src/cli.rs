//! Command-line front end: scenario ingestion, experiment orchestration, and
//! artifact persistence.
//!
//! Every subcommand writes a run manifest (resolved configuration plus seed),
//! a metrics table, and optionally a per-event trace into the output
//! directory. Without `--out` the metrics table goes to standard output.
//! Verbosity is controlled by the `GRADFABRIC_LOG` environment variable.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Mode, ScenarioConfig};
use crate::metrics::{
    metrics_rows, render_csv, render_manifest, render_trace, trace_events, MetricRow,
};
use crate::oracle::{compare_once, random_comparison_instance, Objective};
use crate::simlab::{run_convergence_lab, run_scenario, DelayModel, EtaMode, SgdLabConfig};
use crate::{Error, Result};

/// Network-aware communication control plane for distributed SGD.
#[derive(Debug, Parser)]
#[command(name = "gradfabric", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a cluster scenario and report commits, delays, and traffic.
    Simulate(SimulateArgs),
    /// Run the convex-SGD lab and report the loss-gap trace.
    Convergence(ConvergenceArgs),
    /// Compare the planning heuristic against exhaustive search.
    Oracle(OracleArgs),
    /// Run one scenario per divergence budget and report replica traffic.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario file; built-in defaults apply when omitted.
    pub config: Option<PathBuf>,
    /// Compute/network preset such as C2, N1, or C2-N1.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Divergence budget override.
    #[arg(long)]
    pub divmax: Option<f64>,
    /// Staleness bound override.
    #[arg(long = "tau-max")]
    pub tau_max: Option<u32>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Simulated seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Also write the per-event trace.
    #[arg(long)]
    pub trace: bool,
    /// Output directory for manifest, metrics, and trace.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvergenceArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Average the loss trace over this many seeds.
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Mean commit staleness; omit for serial descent.
    #[arg(long = "tau-bar")]
    pub tau_bar: Option<u32>,
    /// Staleness spread around the mean.
    #[arg(long, requires = "tau_bar")]
    pub epsilon: Option<u32>,
    /// Staleness bound fed to the worst-case step schedule.
    #[arg(long = "tau-max")]
    pub tau_max: Option<u32>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Gradient noise level.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, value_enum)]
    pub eta: Option<EtaMode>,
    /// Step-size constant.
    #[arg(long)]
    pub c: Option<f64>,
    /// Stop when the loss gap reaches this value.
    #[arg(long = "target-gap")]
    pub target_gap: Option<f64>,
    /// Also write the loss trace as per-event records.
    #[arg(long)]
    pub trace: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 100)]
    pub instances: u64,
    /// Skip drawn instances with more updates than this.
    #[arg(long = "max-updates", default_value_t = 6)]
    pub max_updates: u32,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Scenario file; built-in defaults apply when omitted.
    pub config: Option<PathBuf>,
    /// Compute/network preset such as C2, N1, or C2-N1.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated divergence budgets, one scenario each.
    #[arg(long, value_delimiter = ',', required = true)]
    pub divmax: Vec<f64>,
    #[arg(long = "tau-max")]
    pub tau_max: Option<u32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Convergence(a) => convergence(a),
        Command::Oracle(a) => oracle(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn load_scenario(path: &Option<PathBuf>) -> Result<ScenarioConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
            ScenarioConfig::from_toml(&text)
        }
        None => Ok(ScenarioConfig::default()),
    }
}

/// Write the artifact set, or print the table when no directory is given.
fn emit(
    dir: &Option<PathBuf>,
    manifest: &str,
    rows: &[MetricRow],
    trace: Option<&str>,
) -> Result<()> {
    let csv = render_csv(rows);
    match dir {
        Some(dir) => {
            let write = |name: &str, content: &str| {
                fs::write(dir.join(name), content)
                    .map_err(|e| Error::Io(format!("{}: {e}", dir.join(name).display())))
            };
            fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
            write("manifest.toml", manifest)?;
            write("metrics.csv", &csv)?;
            if let Some(t) = trace {
                write("trace.jsonl", t)?;
            }
            log::info!("artifacts written to {}", dir.display());
        }
        None => {
            if trace.is_some() {
                return Err(Error::Config("--trace needs --out to hold the trace file".into()));
            }
            print!("{csv}");
        }
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = load_scenario(&a.config)?;
    if let Some(p) = &a.preset {
        cfg.apply_preset(p)?;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.divmax {
        cfg.div_max = v;
    }
    if let Some(v) = a.tau_max {
        cfg.tau_max = v;
    }
    if let Some(v) = a.mode {
        cfg.mode = v;
    }
    if let Some(v) = a.workers {
        cfg.workers = v;
    }
    if let Some(v) = a.duration {
        cfg.duration_s = v;
    }
    cfg.validate()?;
    log::info!(
        "simulate: {} workers for {} s, seed {}",
        cfg.workers,
        cfg.duration_s,
        cfg.seed
    );
    let m = run_scenario(&cfg)?;
    let out = a.out.clone().or_else(|| cfg.out.as_ref().map(PathBuf::from));
    let manifest = render_manifest("simulate", cfg.seed, &cfg.resolved()?)?;
    let trace = a.trace.then(|| render_trace(&trace_events(&m)));
    emit(&out, &manifest, &metrics_rows(&m), trace.as_deref())?;
    if out.is_some() {
        println!(
            "committed {} updates ({} dropped) in {} simulated seconds",
            m.commits.len(),
            m.drops,
            m.duration_s
        );
    }
    Ok(())
}

fn convergence(a: ConvergenceArgs) -> Result<()> {
    let mut cfg = SgdLabConfig::default();
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.seeds {
        cfg.seeds = v;
    }
    if let Some(v) = a.iterations {
        cfg.iterations = v;
    }
    if let Some(tau_bar) = a.tau_bar {
        cfg.delay = DelayModel::Synthetic { tau_bar, epsilon: a.epsilon.unwrap_or(0) };
    }
    if let Some(v) = a.tau_max {
        cfg.tau_max = v;
    }
    if let Some(v) = a.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = a.noise {
        cfg.noise_std = v;
    }
    if let Some(v) = a.eta {
        cfg.eta_mode = v;
    }
    if let Some(v) = a.c {
        cfg.c = v;
    }
    if let Some(v) = a.target_gap {
        cfg.target_gap = v;
    }
    cfg.validate()?;
    let m = run_convergence_lab(&cfg)?;
    let manifest = render_manifest("convergence", cfg.seed, &cfg)?;
    let trace = a.trace.then(|| render_trace(&trace_events(&m)));
    emit(&a.out, &manifest, &metrics_rows(&m), trace.as_deref())?;
    if a.out.is_some() {
        let (t, gap) = m.loss_trace.last().copied().unwrap_or((0, f64::NAN));
        println!("loss gap {gap} after {t} iterations");
    }
    Ok(())
}

#[derive(Serialize)]
struct OracleManifest {
    instances: u64,
    max_updates: u32,
}

fn oracle(a: OracleArgs) -> Result<()> {
    if a.max_updates < 2 {
        return Err(Error::Config("--max-updates must be at least 2".into()));
    }
    // drawn batch sizes are capped at 6, so a larger cap never skips
    let mut picked = Vec::with_capacity(a.instances as usize);
    let mut index = 0u64;
    while picked.len() < a.instances as usize {
        let inst = random_comparison_instance(a.seed, index);
        index += 1;
        if inst.batch.len() as u32 <= a.max_updates {
            picked.push(inst);
        }
    }
    let outcomes: Vec<(f64, f64)> = picked
        .par_iter()
        .map(|inst| {
            let a = compare_once(inst, Objective::Async)?.ratio;
            let s = compare_once(inst, Objective::Sync)?.ratio;
            Ok((a, s))
        })
        .collect::<Result<_>>()?;
    let worst = |pick: fn(&(f64, f64)) -> f64| outcomes.iter().map(pick).fold(1.0f64, f64::max);
    let mean = |pick: fn(&(f64, f64)) -> f64| {
        outcomes.iter().map(pick).sum::<f64>() / outcomes.len() as f64
    };
    let rows = vec![
        MetricRow::new("oracle", "instances", outcomes.len() as f64, "count"),
        MetricRow::new("oracle", "worst_ratio_async", worst(|o| o.0), "ratio"),
        MetricRow::new("oracle", "worst_ratio_sync", worst(|o| o.1), "ratio"),
        MetricRow::new("oracle", "mean_ratio_async", mean(|o| o.0), "ratio"),
        MetricRow::new("oracle", "mean_ratio_sync", mean(|o| o.1), "ratio"),
    ];
    let manifest = render_manifest(
        "oracle",
        a.seed,
        &OracleManifest { instances: a.instances, max_updates: a.max_updates },
    )?;
    emit(&a.out, &manifest, &rows, None)?;
    println!(
        "worst heuristic/optimum ratio over {} instances: {:.4} (batch mean), {:.4} (makespan)",
        outcomes.len(),
        worst(|o| o.0),
        worst(|o| o.1)
    );
    Ok(())
}

#[derive(Serialize)]
struct SweepManifest {
    divmax: Vec<f64>,
    scenario: ScenarioConfig,
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut base = load_scenario(&a.config)?;
    if let Some(p) = &a.preset {
        base.apply_preset(p)?;
    }
    if let Some(v) = a.seed {
        base.seed = v;
    }
    if let Some(v) = a.tau_max {
        base.tau_max = v;
    }
    base.replicate = true;
    base.validate()?;
    let runs: Vec<crate::simlab::RunMetrics> = a
        .divmax
        .par_iter()
        .map(|d| {
            let mut cfg = base.clone();
            cfg.div_max = *d;
            run_scenario(&cfg)
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (d, m) in a.divmax.iter().zip(&runs) {
        rows.push(MetricRow::new("replica_bytes", &format!("divmax_{d}"), m.bytes_to_replica, "bytes"));
    }
    for (d, m) in a.divmax.iter().zip(&runs) {
        rows.push(MetricRow::new("commits", &format!("divmax_{d}"), m.commits.len() as f64, "count"));
    }
    for (d, m) in a.divmax.iter().zip(&runs) {
        rows.push(MetricRow::new(
            "delayed_commits",
            &format!("divmax_{d}"),
            m.delayed_commits as f64,
            "count",
        ));
    }
    let manifest = render_manifest(
        "sweep",
        base.seed,
        &SweepManifest { divmax: a.divmax.clone(), scenario: base.resolved()? },
    )?;
    emit(&a.out, &manifest, &rows, None)?;
    for (d, m) in a.divmax.iter().zip(&runs) {
        println!("divmax {d}: {} bytes to the replica, {} commits", m.bytes_to_replica, m.commits.len());
    }
    Ok(())
}

/// Parse arguments, run, and map failures onto exit codes.
pub fn main_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own help/version output
            let code = if e.use_stderr() { 2 } else { 0 };
            e.print().expect("clap writes its own diagnostics");
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
