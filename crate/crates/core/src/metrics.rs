//! Counting metrics: MAE, MSE (root-mean-square, per the usual counting
//! convention), NAE, and GAME(L), plus checkpoint evaluation over a split.

use serde::Serialize;

use crate::dataset::{Dataset, LoadedFrame, Split};
use crate::error::{Error, Result};
use crate::model::{count, forward_all, ModelParams};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const GAME_LEVELS: [usize; 3] = [0, 1, 2];

/// Patch edges for a 2^level split of `n` cells: `floor(i * n / 2^level)`.
/// Edges at consecutive levels nest, which makes GAME monotone in L.
fn patch_edges(n: usize, level: usize) -> Vec<usize> {
    let parts = 1usize << level;
    (0..=parts).map(|i| i * n / parts).collect()
}

/// Grid average mean absolute error at level `L`: both maps are split into
/// 2^L x 2^L patches and the absolute patch-count differences are summed.
pub fn game(pred: &Tensor, gt: &Tensor, level: usize) -> Result<f64> {
    if pred.shape() != gt.shape() || pred.shape().len() != 2 {
        return Err(Error::shape(
            "game",
            format!("want matching [h,w] maps, got {:?} and {:?}", pred.shape(), gt.shape()),
        ));
    }
    let (h, w) = (pred.shape()[0], pred.shape()[1]);
    if (1usize << level) > h.min(w) {
        return Err(Error::Config(format!(
            "GAME level {level} needs at least {} cells per side, grid is {h}x{w}",
            1usize << level
        )));
    }
    let rows = patch_edges(h, level);
    let cols = patch_edges(w, level);
    let (pd, gd) = (pred.data(), gt.data());
    let mut total = 0.0;
    for pr in rows.windows(2) {
        for pc in cols.windows(2) {
            let mut sp = 0.0;
            let mut sg = 0.0;
            for r in pr[0]..pr[1] {
                for c in pc[0]..pc[1] {
                    sp += pd[r * w + c];
                    sg += gd[r * w + c];
                }
            }
            total += (sp - sg).abs();
        }
    }
    Ok(total)
}

/// Counting metrics over a set of (prediction, ground truth) map pairs.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub n: usize,
    pub mae: f64,
    /// Root of the mean squared count error.
    pub mse: f64,
    pub nae: f64,
    /// Indexed by level L = 0, 1, 2.
    pub game: Vec<f64>,
    /// Samples skipped by NAE because their true count is zero.
    pub nae_excluded: usize,
    pub per_sample: Vec<SampleMetrics>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SampleMetrics {
    pub pred_count: f64,
    pub true_count: f64,
}

/// Aggregates metrics; GAME(0) uses the same patch loop as the counts, so
/// it equals MAE exactly.
pub fn aggregate(pairs: &[(Tensor, Tensor)]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Config("aggregate needs at least one sample".into()));
    }
    let n = pairs.len();
    let mut sq_sum = 0.0;
    let mut nae_sum = 0.0;
    let mut nae_n = 0usize;
    let mut game_sums = [0.0; GAME_LEVELS.len()];
    let mut per_sample = Vec::with_capacity(n);
    for (pred, gt) in pairs {
        for (i, &level) in GAME_LEVELS.iter().enumerate() {
            game_sums[i] += game(pred, gt, level)?;
        }
        let pred_count = count(pred);
        let true_count = count(gt);
        let err = pred_count - true_count;
        sq_sum += err * err;
        if true_count > 0.0 {
            nae_sum += err.abs() / true_count;
            nae_n += 1;
        }
        per_sample.push(SampleMetrics { pred_count, true_count });
    }
    // GAME(0) is |sum(pred) - sum(gt)| accumulated in the same order as the
    // counts above; report it as MAE so the identity holds bit-for-bit.
    let mae = game_sums[0] / n as f64;
    Ok(MetricsReport {
        n,
        mae,
        mse: (sq_sum / n as f64).sqrt(),
        nae: if nae_n > 0 { nae_sum / nae_n as f64 } else { 0.0 },
        game: game_sums.iter().map(|s| s / n as f64).collect(),
        nae_excluded: n - nae_n,
        per_sample,
    })
}

/// Runs the full-cardinality model (identity view permutation) over loaded
/// frames and aggregates metrics.
pub fn evaluate_frames(
    params: &ModelParams,
    frames: &[LoadedFrame],
    grids: &[Vec<Tensor>],
) -> Result<MetricsReport> {
    let k = params.config.k;
    let identity: Vec<usize> = (0..k).collect();
    let mut pairs = Vec::with_capacity(frames.len());
    for frame in frames {
        let tape = Tape::new();
        let cache = forward_all(
            &tape,
            params,
            &frame.sample.views,
            &grids[frame.id.scene],
            &identity,
            false,
        )?;
        pairs.push((cache.density[k - 1].clone(), frame.sample.gt_density.clone()));
    }
    aggregate(&pairs)
}

/// Evaluates a checkpoint over a dataset split.
pub fn evaluate(params: &ModelParams, dataset: &Dataset, split: Split) -> Result<MetricsReport> {
    if params.config.k != dataset.k() {
        return Err(Error::Config(format!(
            "model expects {} views but the dataset has {}",
            params.config.k,
            dataset.k()
        )));
    }
    let frames = dataset.load_split(split)?;
    if frames.is_empty() {
        return Err(Error::Config(format!("split {split:?} has no frames")));
    }
    let grids = dataset.sampling_grids(params.config.feature_stride())?;
    evaluate_frames(params, &frames, &grids)
}

/// Writes the report as CSV: a summary row followed by per-sample rows.
/// Per-sample rows repeat the per-sample metric values in the same columns.
pub fn write_metrics_csv(report: &MetricsReport, mut w: impl std::io::Write) -> std::io::Result<()> {
    writeln!(w, "row,n,mae,mse,nae,game0,game1,game2,pred_count,true_count")?;
    let mean_pred: f64 =
        report.per_sample.iter().map(|s| s.pred_count).sum::<f64>() / report.n as f64;
    let mean_true: f64 =
        report.per_sample.iter().map(|s| s.true_count).sum::<f64>() / report.n as f64;
    writeln!(
        w,
        "summary,{},{},{},{},{},{},{},{},{}",
        report.n,
        report.mae,
        report.mse,
        report.nae,
        report.game[0],
        report.game[1],
        report.game[2],
        mean_pred,
        mean_true
    )?;
    for (i, s) in report.per_sample.iter().enumerate() {
        let err = (s.pred_count - s.true_count).abs();
        let nae = if s.true_count > 0.0 { err / s.true_count } else { f64::NAN };
        writeln!(
            w,
            "sample_{i},1,{err},{err},{nae},,,,{},{}",
            s.pred_count, s.true_count
        )?;
    }
    Ok(())
}
