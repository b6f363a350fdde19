//! `mvcount`: dataset generation, training, evaluation, gradient checking,
//! and ablation sweeps for the multi-view crowd counting lab.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mvcount_core::config::ExperimentConfig;
use mvcount_core::dataset::{make_dataset, Dataset, Split};
use mvcount_core::error::{Error, Result};
use mvcount_core::gradcheck;
use mvcount_core::losses::TrainMode;
use mvcount_core::metrics::{evaluate, write_metrics_csv};
use mvcount_core::sweep::{run_sweep, SweepAxis};
use mvcount_core::trainer::{load_checkpoint, train, Schedule};

#[derive(Parser)]
#[command(name = "mvcount", version, about = "Semi-supervised multi-view crowd counting lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Baseline1,
    Baseline2,
    Mvpr,
    Mvur,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> TrainMode {
        match m {
            ModeArg::Baseline1 => TrainMode::Baseline1,
            ModeArg::Baseline2 => TrainMode::Baseline2,
            ModeArg::Mvpr => TrainMode::Mvpr,
            ModeArg::Mvur => TrainMode::Mvur,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScheduleArg {
    Random,
    Fixed,
    Simultaneous,
}

impl From<ScheduleArg> for Schedule {
    fn from(s: ScheduleArg) -> Schedule {
        match s {
            ScheduleArg::Random => Schedule::Random,
            ScheduleArg::Fixed => Schedule::Fixed,
            ScheduleArg::Simultaneous => Schedule::Simultaneous,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset directory.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a counting model on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's training mode.
        #[arg(long)]
        mode: Option<ModeArg>,
        /// Overrides the config's schedule.
        #[arg(long)]
        schedule: Option<ScheduleArg>,
        /// Dataset directory (from gen-data).
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint over a dataset split.
    Eval {
        /// Checkpoint stem or .mvct path (the .toml sidecar sits next to it).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Output CSV (summary row + per-sample rows).
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite over all operators and
    /// losses; exits nonzero if any check exceeds the tolerance.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train and evaluate the cross product of one configuration axis.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Axis to vary: beta | weights | schedule | fusion | rate.
        #[arg(long)]
        vary: String,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let manifest = make_dataset(&cfg.data, &out)?;
            let train_n: usize = manifest
                .scenes
                .iter()
                .map(|s| s.frames.iter().filter(|f| f.split == Split::Train).count())
                .sum();
            let labeled_n: usize = manifest
                .scenes
                .iter()
                .map(|s| {
                    s.frames
                        .iter()
                        .filter(|f| f.split == Split::Train && f.labeled)
                        .count()
                })
                .sum();
            let test_n: usize = manifest
                .scenes
                .iter()
                .map(|s| s.frames.iter().filter(|f| f.split == Split::Test).count())
                .sum();
            println!(
                "dataset written to {}: {} scenes x {} frames x {} views",
                out.display(),
                manifest.scenes.len(),
                manifest.config.frames_per_scene,
                manifest.k
            );
            println!(
                "grid {}x{} @ {} m/cell | train {train_n} ({labeled_n} labeled, {:.1}%) | test {test_n}",
                manifest.grid.h,
                manifest.grid.w,
                manifest.grid.meters_per_cell,
                100.0 * labeled_n as f64 / train_n.max(1) as f64
            );
            println!("config hash {}", manifest.config_hash);
            Ok(())
        }
        Command::Train { config, mode, schedule, data, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(m) = mode {
                cfg.train.mode = m.into();
            }
            if let Some(s) = schedule {
                cfg.train.schedule = s.into();
            }
            let dataset = Dataset::open(&data)?;
            let outcome = train(&cfg.model, &cfg.train, &dataset, Some(&out), &cfg.hash())?;
            let metrics = evaluate(&outcome.params, &dataset, cfg.eval.split)?;
            println!(
                "trained {} for {} epochs ({} warm-up) on {}",
                cfg.train.mode.name(),
                cfg.train.epochs,
                cfg.train.warmup_epochs,
                data.display()
            );
            println!(
                "final eval: n {} mae {:.4} mse {:.4} nae {:.4} game1 {:.4} game2 {:.4}",
                metrics.n, metrics.mae, metrics.mse, metrics.nae, metrics.game[1], metrics.game[2]
            );
            println!("artifacts in {}", out.display());
            Ok(())
        }
        Command::Eval { checkpoint, data, split, out } => {
            let split: Split = split.parse()?;
            let dataset = Dataset::open(&data)?;
            let (params, manifest) = load_checkpoint(&checkpoint)?;
            if manifest.grid != *dataset.grid() {
                return Err(Error::Config(format!(
                    "checkpoint grid {:?} does not match dataset grid {:?}",
                    manifest.grid,
                    dataset.grid()
                )));
            }
            let metrics = evaluate(&params, &dataset, split)?;
            let mut buf = Vec::new();
            write_metrics_csv(&metrics, &mut buf).map_err(|e| Error::io(&out, e))?;
            fs::write(&out, buf).map_err(|e| Error::io(&out, e))?;
            println!(
                "n {} mae {:.4} mse {:.4} nae {:.4} game0 {:.4} game1 {:.4} game2 {:.4}",
                metrics.n,
                metrics.mae,
                metrics.mse,
                metrics.nae,
                metrics.game[0],
                metrics.game[1],
                metrics.game[2]
            );
            println!("report written to {}", out.display());
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let reports = gradcheck::full_suite(seed)?;
            let mut failed = 0;
            for r in &reports {
                println!(
                    "{} {:<28} max rel err {:.3e} ({} elements)",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_rel_err,
                    r.elements
                );
                if !r.passed() {
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(Error::Numeric(format!(
                    "{failed} of {} gradient checks exceeded {}",
                    reports.len(),
                    gradcheck::TOLERANCE
                )));
            }
            println!("all {} checks within {}", reports.len(), gradcheck::TOLERANCE);
            Ok(())
        }
        Command::Sweep { config, vary, data, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let axis: SweepAxis = vary.parse()?;
            let dataset = Dataset::open(&data)?;
            let rows = run_sweep(&cfg, axis, &dataset, &out)?;
            println!("axis,value,mae,mse,nae");
            for row in &rows {
                println!(
                    "{},{},{:.4},{:.4},{:.4}",
                    axis.name(),
                    row.label,
                    row.metrics.mae,
                    row.metrics.mse,
                    row.metrics.nae
                );
            }
            println!("summary and plot data in {}", out.display());
            Ok(())
        }
    }
}
