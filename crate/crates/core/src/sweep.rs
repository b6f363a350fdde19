//! Ablation sweeps: train-and-evaluate grids over one configuration axis,
//! emitting a summary table and plot-ready series.

use std::fs;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::losses::TrainMode;
use crate::metrics::{evaluate, MetricsReport};
use crate::model::FusionMode;
use crate::trainer::{train, Schedule};

/// Ranking-loss weights swept for MVPR.
pub const BETA_GRID: [f64; 6] = [0.0, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2];
/// (eta, gamma) pairs swept for MVUR.
pub const WEIGHT_GRID: [(f64, f64); 7] = [
    (0.0, 1e-3),
    (1e-3, 0.0),
    (1e-1, 1e-3),
    (1e-2, 1e-3),
    (1e-3, 1e-1),
    (1e-3, 1e-2),
    (1e-3, 1e-3),
];
pub const RATE_GRID: [f64; 3] = [5.0, 10.0, 20.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Beta,
    Weights,
    Schedule,
    Fusion,
    Rate,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SweepAxis::Beta),
            "weights" => Ok(SweepAxis::Weights),
            "schedule" => Ok(SweepAxis::Schedule),
            "fusion" => Ok(SweepAxis::Fusion),
            "rate" => Ok(SweepAxis::Rate),
            other => Err(Error::Config(format!(
                "unknown sweep axis '{other}' (want beta|weights|schedule|fusion|rate)"
            ))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Beta => "beta",
            SweepAxis::Weights => "weights",
            SweepAxis::Schedule => "schedule",
            SweepAxis::Fusion => "fusion",
            SweepAxis::Rate => "rate",
        }
    }
}

/// One sweep cell: the axis value, its run directory, and final metrics.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub label: String,
    /// Numeric x for plot files; None for categorical axes.
    pub x: Option<f64>,
    pub metrics: MetricsReport,
}

fn cells(cfg: &ExperimentConfig, axis: SweepAxis) -> Vec<(String, Option<f64>, ExperimentConfig)> {
    match axis {
        SweepAxis::Beta => BETA_GRID
            .iter()
            .map(|&beta| {
                let mut c = cfg.clone();
                c.train.mode = TrainMode::Mvpr;
                c.train.weights.beta = beta;
                (format!("{beta}"), Some(beta), c)
            })
            .collect(),
        SweepAxis::Weights => WEIGHT_GRID
            .iter()
            .map(|&(eta, gamma)| {
                let mut c = cfg.clone();
                c.train.mode = TrainMode::Mvur;
                c.train.weights.eta = eta;
                c.train.weights.gamma = gamma;
                (format!("eta{eta}_gamma{gamma}"), None, c)
            })
            .collect(),
        SweepAxis::Schedule => [Schedule::Random, Schedule::Fixed, Schedule::Simultaneous]
            .iter()
            .map(|&schedule| {
                let mut c = cfg.clone();
                c.train.schedule = schedule;
                (schedule.table_name().to_string(), None, c)
            })
            .collect(),
        SweepAxis::Fusion => [FusionMode::Add, FusionMode::Max, FusionMode::Concat]
            .iter()
            .map(|&fusion| {
                let mut c = cfg.clone();
                c.model.fusion = fusion;
                (fusion.table_name().to_string(), None, c)
            })
            .collect(),
        SweepAxis::Rate => RATE_GRID
            .iter()
            .map(|&rate| {
                let mut c = cfg.clone();
                c.train.label_rate = rate;
                (format!("{rate}"), Some(rate), c)
            })
            .collect(),
    }
}

/// Trains and evaluates every cell of the axis at fixed seeds; writes
/// `sweep_summary.csv`, a `plot_<axis>.csv` (x, y = final MAE), and one run
/// directory per cell.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    dataset: &Dataset,
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::new();
    for (label, x, cell_cfg) in cells(cfg, axis) {
        let run_dir = out_dir.join(format!("{}_{}", axis.name(), sanitize(&label)));
        let outcome = train(
            &cell_cfg.model,
            &cell_cfg.train,
            dataset,
            Some(&run_dir),
            &cell_cfg.hash(),
        )?;
        let metrics = evaluate(&outcome.params, dataset, cell_cfg.eval.split)?;
        rows.push(SweepRow { label, x, metrics });
    }

    let summary_path = out_dir.join("sweep_summary.csv");
    let mut summary = String::from("axis,value,n,mae,mse,nae,game0,game1,game2\n");
    for row in &rows {
        let m = &row.metrics;
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            axis.name(),
            row.label,
            m.n,
            m.mae,
            m.mse,
            m.nae,
            m.game[0],
            m.game[1],
            m.game[2]
        ));
    }
    fs::write(&summary_path, summary).map_err(|e| Error::io(&summary_path, e))?;

    let plot_path = out_dir.join(format!("plot_{}.csv", axis.name()));
    let mut plot = String::from("x,y\n");
    for row in &rows {
        match row.x {
            Some(x) => plot.push_str(&format!("{x},{}\n", row.metrics.mae)),
            None => plot.push_str(&format!("{},{}\n", row.label, row.metrics.mae)),
        }
    }
    fs::write(&plot_path, plot).map_err(|e| Error::io(&plot_path, e))?;

    Ok(rows)
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
