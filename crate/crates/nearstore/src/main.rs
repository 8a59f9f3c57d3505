use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use nearstore::config::ExperimentConfig;
use nearstore::experiment::{run_experiment, sweep};
use nearstore::report;
use nearstore::verify::{print_table, run_all, VerifyOptions};
use nearstore_core::calibration::paper_like;
use nearstore_core::numerics::{OptimizerConfig, OptimizerKind};
use nearstore_core::workload::Mode;

#[derive(Parser)]
#[command(name = "nearstore", version, about = "Near-storage optimizer offload: training runs, timing sweeps and self-checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy model and write per-step and aggregate CSVs.
    Train(TrainArgs),
    /// Time a grid of modes, device counts and ratios on the paper-scale workload.
    Sweep(SweepArgs),
    /// Time one paper-scale iteration and export its timeline.
    Simulate(SimulateArgs),
    /// Run the equivalence, ledger and roundtrip suites.
    Verify(VerifyArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    /// TOML experiment config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    devices: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    compression_pct: Option<f64>,
    /// TOML file with a fabric topology.
    #[arg(long)]
    topology: Option<PathBuf>,
    #[arg(long, value_parser = parse_optimizer)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    error_feedback: bool,
    /// Single-threaded device pipelines; output files are byte-identical across runs.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_values = ["base", "su", "su_o", "su_o_c"])]
    modes: Vec<Mode>,
    /// Device counts: a list (1,2,4) or a range (1-10).
    #[arg(long, default_value = "1-10", value_parser = parse_counts)]
    devices: Counts,
    #[arg(long, value_delimiter = ',', default_values = ["10"])]
    ratios: Vec<f64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[arg(long)]
    mode: Mode,
    #[arg(long, default_value_t = 1)]
    devices: usize,
    #[arg(long, default_value_t = 10.0)]
    compression_pct: f64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct VerifyArgs {
    /// Scratch directory for device files; a temporary one by default.
    #[arg(long)]
    work_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    steps: u64,
    #[arg(long, default_value_t = 3)]
    devices: usize,
    /// Overwrite stored bytes before the persisted-state check.
    #[arg(long)]
    corrupt_store: bool,
}

#[derive(Clone, Debug)]
struct Counts(Vec<usize>);

fn parse_counts(s: &str) -> Result<Counts, String> {
    let bad = |_| format!("bad device count list {s:?}");
    let v = if let Some((a, b)) = s.split_once('-') {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(bad)?, b.trim().parse().map_err(bad)?);
        (a..=b).collect()
    } else {
        s.split(',').map(|x| x.trim().parse().map_err(bad)).collect::<Result<Vec<usize>, _>>()?
    };
    if v.is_empty() || v.contains(&0) {
        return Err(format!("device counts must be positive: {s:?}"));
    }
    Ok(Counts(v))
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd_momentum" | "sgd" => Ok(OptimizerKind::SgdMomentum),
        "adagrad" => Ok(OptimizerKind::Adagrad),
        _ => Err(format!("unknown optimizer {s:?}; expected adam, sgd_momentum or adagrad")),
    }
}

fn out_dir(flag: Option<PathBuf>, fallback: PathBuf) -> PathBuf {
    std::env::var_os(nearstore::config::OUT_DIR_ENV).map(PathBuf::from).or(flag).unwrap_or(fallback)
}

fn train(a: TrainArgs) -> anyhow::Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(kind) = a.optimizer {
        let lr = cfg.optimizer.lr;
        cfg.optimizer = match kind {
            OptimizerKind::Adam => OptimizerConfig::adam(lr),
            OptimizerKind::SgdMomentum => OptimizerConfig::sgd_momentum(lr, cfg.optimizer.momentum_coef),
            OptimizerKind::Adagrad => OptimizerConfig::adagrad(lr),
        };
    }
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(d) = a.devices {
        cfg.devices = d;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.compression_pct.is_some() {
        cfg.compression_pct = a.compression_pct;
    }
    if a.topology.is_some() {
        cfg.topology_file = a.topology;
    }
    if let Some(lr) = a.lr {
        cfg.optimizer.lr = lr;
    }
    cfg.error_feedback |= a.error_feedback;
    cfg.deterministic |= a.deterministic;
    let out = out_dir(a.out, cfg.out_dir.clone());
    cfg.validate()?;
    let report = run_experiment(&cfg, &out.join("storage")).context("training run failed")?;
    let paths = report::write_experiment(&out, &report)?;
    report::print_summary(&mut std::io::stdout(), &report)?;
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn run_sweep(a: SweepArgs) -> anyhow::Result<ExitCode> {
    let rows = sweep(&a.modes, &a.devices.0, &a.ratios, &Default::default())?;
    let out = out_dir(Some(a.out), PathBuf::from("out"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("sweep.csv");
    report::write_sweep(&path, &rows)?;
    println!("{:<8} {:>7} {:>6} {:>12} {:>12} {:>9} {:>9}", "mode", "devices", "ratio", "update_s", "total_s", "speedup", "vs_base");
    for r in &rows {
        println!(
            "{:<8} {:>7} {:>6} {:>12.3} {:>12.3} {:>9.3} {:>9}",
            r.mode.name(),
            r.devices,
            r.compression_pct.map_or("-".into(), |c| c.to_string()),
            r.update_s,
            r.total_s,
            r.speedup_update,
            r.speedup_vs_base.map_or("-".into(), |s| format!("{s:.3}"))
        );
    }
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn simulate(a: SimulateArgs) -> anyhow::Result<ExitCode> {
    if a.mode == Mode::InMemory {
        bail!("in_memory has no storage traffic to time");
    }
    let (tl, b) = paper_like(a.mode, a.devices, a.compression_pct).run()?;
    let out = out_dir(Some(a.out), PathBuf::from("out"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    report::write_timeline(&out.join("timeline.csv"), &tl)?;
    report::write_breakdown(&out.join("breakdown.csv"), &b)?;
    for p in nearstore_core::ledger::Phase::ALL {
        println!("{:<42} {:>10.3} s {:>7.2}%", p.label(), b.phase(p), 100.0 * b.fraction(p));
    }
    println!("{:<42} {:>10.3} s", "Total", b.total);
    Ok(ExitCode::SUCCESS)
}

fn verify(a: VerifyArgs) -> anyhow::Result<ExitCode> {
    let tmp;
    let work_dir = match a.work_dir {
        Some(d) => d,
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    let opts = VerifyOptions { work_dir, steps: a.steps, devices: a.devices, corrupt_store: a.corrupt_store };
    let checks = run_all(&opts);
    print_table(&mut std::io::stdout(), &checks)?;
    Ok(if checks.iter().all(|c| c.passed) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let r = match cli.command {
        Command::Train(a) => train(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Simulate(a) => simulate(a),
        Command::Verify(a) => verify(a),
    };
    match r {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
