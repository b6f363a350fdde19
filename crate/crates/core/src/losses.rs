//! Training objectives: labeled density loss with auxiliary subset terms,
//! the prediction-ranking hinge between cardinalities, uncertainty
//! supervision from prediction errors, and the coverage-masked uncertainty
//! ranking hinge.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardCache;
use crate::scene::{subset_mask, MultiViewSample};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Cells violate a ranking inequality when they break it by more than this.
pub const VIOLATION_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Baseline1,
    Baseline2,
    Mvpr,
    Mvur,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Baseline1 => "baseline1",
            TrainMode::Baseline2 => "baseline2",
            TrainMode::Mvpr => "mvpr",
            TrainMode::Mvur => "mvur",
        }
    }
}

/// Loss term weights and pairing structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Auxiliary subset density weight, the paper's lambda.
    pub lambda_aux: f64,
    /// Prediction-ranking weight beta.
    pub beta: f64,
    /// Uncertainty supervision weight eta.
    pub eta: f64,
    /// Uncertainty-ranking weight gamma.
    pub gamma: f64,
    /// Cardinalities supervised by the auxiliary term; subset of 1..k-1.
    pub aux_set: Vec<usize>,
    /// Ranking pairs (j1, j2) with j1 < j2 <= k.
    pub rank_pairs: Vec<(usize, usize)>,
    /// Divide masked ranking means by the mask size instead of h*w.
    pub mean_over_mask: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights::for_k(3)
    }
}

impl LossWeights {
    /// Paper defaults for `k` views: all weights 0.001, auxiliary set
    /// {1..k-1}, consecutive ranking pairs.
    pub fn for_k(k: usize) -> Self {
        LossWeights {
            lambda_aux: 0.001,
            beta: 0.001,
            eta: 0.001,
            gamma: 0.001,
            aux_set: (1..k).collect(),
            rank_pairs: (1..k).map(|j| (j, j + 1)).collect(),
            mean_over_mask: false,
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        for &(j1, j2) in &self.rank_pairs {
            if !(j1 < j2 && j2 <= k && j1 >= 1) {
                return Err(Error::Config(format!(
                    "rank pair ({j1}, {j2}) must satisfy 1 <= j1 < j2 <= {k}"
                )));
            }
        }
        for &j in &self.aux_set {
            if j < 1 || j >= k {
                return Err(Error::Config(format!("aux cardinality {j} not in 1..{k}")));
            }
        }
        for (name, v) in [
            ("lambda", self.lambda_aux),
            ("beta", self.beta),
            ("eta", self.eta),
            ("gamma", self.gamma),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a nonnegative finite weight")));
            }
        }
        Ok(())
    }
}

/// Scalar loss terms of one training step plus the mode's per-pair ranking
/// violation rates.
#[derive(Clone, Debug, Default)]
pub struct LossReport {
    pub l_label: f64,
    pub l_pre_rank: f64,
    pub l_un_label: f64,
    pub l_un_rank: f64,
    pub total: f64,
    pub violation_rates: Vec<f64>,
}

/// Mean of squared differences over all cells.
pub fn mse(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(&d, &d)?;
    tape.mean(&sq)
}

/// Ground truth restricted to the union coverage of the subset C_j.
pub fn masked_gt(sample: &MultiViewSample, cache: &ForwardCache, j: usize) -> Result<Tensor> {
    let mask = subset_mask(&sample.coverage, cache.subset(j))?;
    sample.gt_density.zip(&mask, |g, m| g * m)
}

/// Labeled density loss: MSE against the full ground truth plus
/// lambda-weighted auxiliary MSEs against subset-masked ground truths.
pub fn loss_label(
    tape: &Tape,
    cache: &ForwardCache,
    sample: &MultiViewSample,
    w: &LossWeights,
) -> Result<Tensor> {
    if !sample.labeled {
        return Err(Error::Config("loss_label requires a labeled sample".into()));
    }
    let k = cache.k();
    let mut total = mse(tape, &cache.density[k - 1], &sample.gt_density)?;
    if w.lambda_aux > 0.0 {
        for &j in &w.aux_set {
            let target = masked_gt(sample, cache, j)?;
            let aux = mse(tape, &cache.density[j - 1], &target)?;
            total = tape.add(&total, &tape.mul_scalar(&aux, w.lambda_aux)?)?;
        }
    }
    Ok(total)
}

/// Hinge between two maps: mean over all cells of max(0, a - b).
pub fn rank_penalty(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "rank_penalty",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let d = tape.sub(a, b)?;
    tape.mean(&tape.relu(&d)?)
}

/// Prediction-ranking loss: sum of hinges over the configured pairs,
/// penalizing fewer-view predictions that exceed more-view predictions.
pub fn loss_pre_rank(tape: &Tape, cache: &ForwardCache, w: &LossWeights) -> Result<Tensor> {
    if w.rank_pairs.is_empty() {
        return Err(Error::Config("loss_pre_rank needs at least one rank pair".into()));
    }
    let mut total: Option<Tensor> = None;
    for &(j1, j2) in &w.rank_pairs {
        let pair = rank_penalty(tape, &cache.density[j1 - 1], &cache.density[j2 - 1])?;
        total = Some(match total {
            Some(t) => tape.add(&t, &pair)?,
            None => pair,
        });
    }
    Ok(total.expect("at least one pair"))
}

/// Uncertainty supervision targets: the per-cardinality prediction error
/// |S_j - gt (x) mask(C_j)|, detached so no gradient flows through S_j.
pub fn uncertainty_targets(cache: &ForwardCache, sample: &MultiViewSample) -> Result<Vec<Tensor>> {
    if !sample.labeled {
        return Err(Error::Config("uncertainty targets require a labeled sample".into()));
    }
    (1..=cache.k())
        .map(|j| {
            let target = masked_gt(sample, cache, j)?;
            cache.density[j - 1].detached().zip(&target, |s, g| (s - g).abs())
        })
        .collect()
}

/// Uncertainty estimation loss: sum over cardinalities of MSE(U_j, U_j^gt).
pub fn loss_un_label(tape: &Tape, cache: &ForwardCache, targets: &[Tensor]) -> Result<Tensor> {
    if cache.uncertainty.len() != targets.len() {
        return Err(Error::shape(
            "loss_un_label",
            format!(
                "{} uncertainty maps vs {} targets",
                cache.uncertainty.len(),
                targets.len()
            ),
        ));
    }
    let mut total: Option<Tensor> = None;
    for (u, t) in cache.uncertainty.iter().zip(targets) {
        let term = mse(tape, u, t)?;
        total = Some(match total {
            Some(acc) => tape.add(&acc, &term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::shape("loss_un_label", "no uncertainty maps in cache"))
}

/// Masked uncertainty-ranking loss: for each pair, hinge between the
/// more-view and fewer-view uncertainties on the smaller subset's coverage.
/// The mean runs over all h*w cells unless `mean_over_mask` is set.
pub fn loss_un_rank(
    tape: &Tape,
    cache: &ForwardCache,
    sample: &MultiViewSample,
    w: &LossWeights,
) -> Result<Tensor> {
    if w.rank_pairs.is_empty() {
        return Err(Error::Config("loss_un_rank needs at least one rank pair".into()));
    }
    if cache.uncertainty.is_empty() {
        return Err(Error::shape("loss_un_rank", "cache has no uncertainty maps"));
    }
    let mut total: Option<Tensor> = None;
    for &(j1, j2) in &w.rank_pairs {
        let mask = subset_mask(&sample.coverage, cache.subset(j1))?;
        let u1m = tape.mul(&cache.uncertainty[j1 - 1], &mask)?;
        let u2m = tape.mul(&cache.uncertainty[j2 - 1], &mask)?;
        let hinge = tape.relu(&tape.sub(&u2m, &u1m)?)?;
        let term = if w.mean_over_mask {
            let cells = mask.sum_value();
            if cells == 0.0 {
                continue;
            }
            tape.mul_scalar(&tape.sum(&hinge)?, 1.0 / cells)?
        } else {
            tape.mean(&hinge)?
        };
        total = Some(match total {
            Some(acc) => tape.add(&acc, &term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| Tensor::scalar(0.0)))
}

/// Fraction of cells breaking S_j1 <= S_j2, per configured pair.
pub fn prediction_violation_rates(cache: &ForwardCache, pairs: &[(usize, usize)]) -> Vec<f64> {
    pairs
        .iter()
        .map(|&(j1, j2)| {
            let a = cache.density[j1 - 1].data();
            let b = cache.density[j2 - 1].data();
            let violations = a.iter().zip(b).filter(|(x, y)| *x - *y > VIOLATION_TOL).count();
            violations as f64 / a.len() as f64
        })
        .collect()
}

/// Fraction of cells breaking U_j2 <= U_j1 on the smaller subset's
/// coverage, per configured pair (denominator: all h*w cells).
pub fn uncertainty_violation_rates(
    cache: &ForwardCache,
    sample: &MultiViewSample,
    pairs: &[(usize, usize)],
) -> Result<Vec<f64>> {
    if cache.uncertainty.len() != cache.k() {
        return Err(Error::shape(
            "uncertainty_violation_rates",
            "cache has no uncertainty maps",
        ));
    }
    pairs
        .iter()
        .map(|&(j1, j2)| {
            let mask = subset_mask(&sample.coverage, cache.subset(j1))?;
            let u1 = cache.uncertainty[j1 - 1].data();
            let u2 = cache.uncertainty[j2 - 1].data();
            let violations = mask
                .data()
                .iter()
                .zip(u1.iter().zip(u2))
                .filter(|(m, (x, y))| **m > 0.0 && *y - *x > VIOLATION_TOL)
                .count();
            Ok(violations as f64 / u1.len() as f64)
        })
        .collect()
}

/// Assembles the mode's objective for one sample. Terms that do not apply
/// to the sample's label state (or whose weight is zero) are dropped; when
/// nothing remains the returned tensor is a constant zero off the tape, and
/// the caller skips the optimizer step.
pub fn total_loss(
    tape: &Tape,
    cache: &ForwardCache,
    sample: &MultiViewSample,
    w: &LossWeights,
    mode: TrainMode,
) -> Result<(Tensor, LossReport)> {
    let mut report = LossReport::default();
    let mut terms: Vec<Tensor> = Vec::new();

    if sample.labeled {
        let label = match mode {
            TrainMode::Baseline1 => {
                let zero_lambda = LossWeights { lambda_aux: 0.0, ..w.clone() };
                loss_label(tape, cache, sample, &zero_lambda)?
            }
            _ => loss_label(tape, cache, sample, w)?,
        };
        report.l_label = label.item();
        terms.push(label);

        if mode == TrainMode::Mvur && w.eta > 0.0 {
            let targets = uncertainty_targets(cache, sample)?;
            let un_label = loss_un_label(tape, cache, &targets)?;
            report.l_un_label = un_label.item();
            terms.push(tape.mul_scalar(&un_label, w.eta)?);
        }
    } else {
        match mode {
            TrainMode::Baseline1 | TrainMode::Baseline2 => {}
            TrainMode::Mvpr => {
                if w.beta > 0.0 {
                    let pre = loss_pre_rank(tape, cache, w)?;
                    report.l_pre_rank = pre.item();
                    terms.push(tape.mul_scalar(&pre, w.beta)?);
                }
            }
            TrainMode::Mvur => {
                if w.gamma > 0.0 {
                    let un_rank = loss_un_rank(tape, cache, sample, w)?;
                    report.l_un_rank = un_rank.item();
                    terms.push(tape.mul_scalar(&un_rank, w.gamma)?);
                }
            }
        }
    }

    let total = match terms.len() {
        0 => Tensor::scalar(0.0),
        _ => {
            let mut acc = terms[0].clone();
            for t in &terms[1..] {
                acc = tape.add(&acc, t)?;
            }
            acc
        }
    };
    report.total = total.item();
    report.violation_rates = match mode {
        TrainMode::Mvur => uncertainty_violation_rates(cache, sample, &w.rank_pairs)?,
        _ => prediction_violation_rates(cache, &w.rank_pairs),
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::GridSpec;

    fn map(values: &[f64]) -> Tensor {
        let side = (values.len() as f64).sqrt() as usize;
        assert_eq!(side * side, values.len());
        Tensor::new(vec![side, side], values.to_vec()).unwrap()
    }

    fn cache_with(density: Vec<Tensor>, uncertainty: Vec<Tensor>) -> ForwardCache {
        let k = density.len();
        ForwardCache {
            permutation: (0..k).collect(),
            features: vec![],
            projected: vec![],
            fused: vec![],
            hidden: vec![],
            density,
            uncertainty,
        }
    }

    fn sample_with(gt: Tensor, coverage: Vec<Tensor>, labeled: bool) -> MultiViewSample {
        MultiViewSample { views: vec![], cameras: vec![], gt_density: gt, coverage, labeled }
    }

    fn grid_spec() -> GridSpec {
        GridSpec { h: 2, w: 2, meters_per_cell: 1.0, plane_height: 0.0 }
    }

    #[test]
    fn rank_penalty_hand_case() {
        let tape = Tape::new();
        let a = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.4, 0.2]).unwrap();
        let p = rank_penalty(&tape, &a, &b).unwrap();
        assert!((p.item() - 0.3).abs() < 1e-15);
        // satisfied constraint and equality are free
        let q = rank_penalty(&tape, &b, &a).unwrap();
        assert!((q.item() - 0.1).abs() < 1e-15); // 0.2 > 0.0 violates on one cell
        let r = rank_penalty(&tape, &a, &a).unwrap();
        assert_eq!(r.item(), 0.0);
        assert!(rank_penalty(&tape, &a, &map(&[0.0; 4])).is_err());
    }

    #[test]
    fn rank_penalty_gradient_routes_to_violating_cells() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::new(vec![4], vec![1.0, 0.0, 0.5, 0.2]).unwrap());
        let b = tape.leaf(&Tensor::new(vec![4], vec![0.4, 0.2, 0.5, 0.9]).unwrap());
        let p = rank_penalty(&tape, &a, &b).unwrap();
        let grads = tape.backward(&p).unwrap();
        let ga = grads.grad_of(&a);
        let gb = grads.grad_of(&b);
        // only cell 0 violates (1.0 > 0.4); ties give zero subgradient
        assert_eq!(ga.data(), &[0.25, 0.0, 0.0, 0.0]);
        assert_eq!(gb.data(), &[-0.25, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rank_penalty_is_scale_equivariant() {
        let tape = Tape::new();
        let a = map(&[0.9, 0.1, 0.4, 0.7]);
        let b = map(&[0.2, 0.3, 0.4, 0.1]);
        let base = rank_penalty(&tape, &a, &b).unwrap().item();
        for c in [0.5, 2.0, 10.0] {
            let ca = a.map(|x| c * x);
            let cb = b.map(|x| c * x);
            let scaled = rank_penalty(&tape, &ca, &cb).unwrap().item();
            assert!((scaled - c * base).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_label_zero_on_perfect_prediction_and_plain_mse_at_lambda_zero() {
        let gt = map(&[1.0, 0.0, 2.0, 0.5]);
        let full = Tensor::full(vec![2, 2], 1.0);
        let w = LossWeights { rank_pairs: vec![(1, 2), (2, 3)], aux_set: vec![1, 2], ..LossWeights::for_k(3) };
        let sample = sample_with(gt.clone(), vec![full.clone(), full.clone(), full.clone()], true);
        let cache = cache_with(vec![gt.clone(), gt.clone(), gt.clone()], vec![]);
        let tape = Tape::new();
        assert_eq!(loss_label(&tape, &cache, &sample, &w).unwrap().item(), 0.0);

        // lambda = 0 reduces to the main-term MSE
        let off = map(&[1.5, 0.0, 2.0, 0.5]);
        let cache = cache_with(vec![map(&[9.0; 4]), map(&[9.0; 4]), off.clone()], vec![]);
        let w0 = LossWeights { lambda_aux: 0.0, ..w.clone() };
        let tape = Tape::new();
        let got = loss_label(&tape, &cache, &sample, &w0).unwrap().item();
        assert!((got - 0.0625).abs() < 1e-15); // (0.5^2)/4

        let unlabeled = sample_with(gt, vec![full.clone(), full.clone(), full], false);
        let tape = Tape::new();
        assert!(loss_label(&tape, &cache, &unlabeled, &w).is_err());
    }

    #[test]
    fn uncertainty_targets_are_absolute_errors_and_detached() {
        let tape = Tape::new();
        let s = tape.leaf(&Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let gt = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let full = Tensor::full(vec![1, 1], 1.0);
        let cache = cache_with(vec![s], vec![]);
        let sample = sample_with(gt, vec![full], true);
        let targets = uncertainty_targets(&cache, &sample).unwrap();
        assert_eq!(targets[0].data(), &[1.0]);
        assert!(!targets[0].is_on_tape(), "target must not carry gradients");

        let unlabeled = MultiViewSample { labeled: false, ..sample };
        assert!(uncertainty_targets(&cache, &unlabeled).is_err());
    }

    #[test]
    fn loss_un_label_hand_case_and_homogeneity() {
        let tape = Tape::new();
        let u = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        let t = Tensor::new(vec![1, 1], vec![0.1]).unwrap();
        let cache = cache_with(vec![u.clone()], vec![u.clone()]);
        let got = loss_un_label(&tape, &cache, &[t.clone()]).unwrap().item();
        assert!((got - 0.16).abs() < 1e-15);

        // doubling residuals quadruples the loss
        let u2 = Tensor::new(vec![1, 1], vec![0.9]).unwrap();
        let cache2 = cache_with(vec![u2.clone()], vec![u2]);
        let got2 = loss_un_label(&tape, &cache2, &[t]).unwrap().item();
        assert!((got2 - 0.64).abs() < 1e-12);
    }

    #[test]
    fn loss_un_rank_masks_and_gates() {
        let _ = grid_spec();
        let w = LossWeights::for_k(2);
        let mask0 = map(&[1.0, 1.0, 0.0, 0.0]);
        let mask1 = map(&[0.0, 1.0, 1.0, 0.0]);
        let u1 = map(&[0.5, 0.2, 0.9, 0.1]);
        let u2 = map(&[0.7, 0.1, 2.0, 5.0]); // violates at cell 0 (in mask0), 2 & 3 (outside)
        let sample = sample_with(map(&[0.0; 4]), vec![mask0, mask1], false);
        let cache = cache_with(vec![u1.clone(), u2.clone()], vec![u1.clone(), u2]);
        let tape = Tape::new();
        let got = loss_un_rank(&tape, &cache, &sample, &w).unwrap().item();
        // only cell 0 contributes: max(0, 0.7 - 0.5) / 4
        assert!((got - 0.05).abs() < 1e-15, "got {got}");

        // values outside the mask are irrelevant
        let u2b = map(&[0.7, 0.1, -3.0, 100.0]);
        let cache_b = cache_with(vec![u1.clone(), u2b.clone()], vec![u1.clone(), u2b]);
        let tape = Tape::new();
        let same = loss_un_rank(&tape, &cache_b, &sample, &w).unwrap().item();
        assert_eq!(got, same);

        // zero mask gates everything off
        let zero_sample = sample_with(map(&[0.0; 4]), vec![map(&[0.0; 4]), map(&[0.0; 4])], false);
        let tape = Tape::new();
        let gated = loss_un_rank(&tape, &cache_b, &zero_sample, &w).unwrap().item();
        assert_eq!(gated, 0.0);

        // satisfied ranking on the mask is free
        let cache_ok = cache_with(vec![u1.clone(), map(&[0.0; 4])], vec![u1, map(&[0.0; 4])]);
        let tape = Tape::new();
        let ok = loss_un_rank(&tape, &cache_ok, &sample, &w).unwrap().item();
        assert_eq!(ok, 0.0);
    }

    #[test]
    fn total_loss_term_selection_per_mode_and_label_state() {
        let gt = map(&[1.0, 0.0, 0.0, 2.0]);
        let full = Tensor::full(vec![2, 2], 1.0);
        let w = LossWeights::for_k(2);
        let s1 = map(&[0.9, 0.3, 0.1, 1.5]);
        let s2 = map(&[0.5, 0.1, 0.2, 2.1]);
        let u1 = map(&[0.4, 0.3, 0.2, 0.1]);
        let u2 = map(&[0.5, 0.2, 0.1, 0.05]);
        let cache = cache_with(vec![s1.clone(), s2.clone()], vec![u1, u2]);

        let labeled = sample_with(gt.clone(), vec![full.clone(), full.clone()], true);
        let unlabeled = sample_with(gt, vec![full.clone(), full], false);

        // Baseline modes never touch unlabeled samples
        for mode in [TrainMode::Baseline1, TrainMode::Baseline2] {
            let tape = Tape::new();
            let (total, report) = total_loss(&tape, &cache, &unlabeled, &w, mode).unwrap();
            assert_eq!(report.total, 0.0);
            assert!(!total.is_on_tape());
        }

        // MVPR unlabeled: exactly beta * L_pre_rank
        let tape = Tape::new();
        let (_, report) = total_loss(&tape, &cache, &unlabeled, &w, TrainMode::Mvpr).unwrap();
        let tape2 = Tape::new();
        let pre = loss_pre_rank(&tape2, &cache, &w).unwrap().item();
        assert!((report.total - w.beta * pre).abs() < 1e-15);
        assert_eq!(report.l_pre_rank, pre);
        assert_eq!(report.l_label, 0.0);

        // MVUR never contains the prediction-ranking term
        let tape = Tape::new();
        let (_, report) = total_loss(&tape, &cache, &labeled, &w, TrainMode::Mvur).unwrap();
        assert_eq!(report.l_pre_rank, 0.0);
        assert!(report.l_un_label > 0.0);
        assert_eq!(report.l_un_rank, 0.0, "un_rank applies to unlabeled samples");
        let tape = Tape::new();
        let (_, report) = total_loss(&tape, &cache, &unlabeled, &w, TrainMode::Mvur).unwrap();
        assert_eq!(report.l_pre_rank, 0.0);
        assert_eq!(report.l_label, 0.0);

        // MVPR labeled matches Baseline2 labeled (same L_label)
        let tape = Tape::new();
        let (_, mvpr) = total_loss(&tape, &cache, &labeled, &w, TrainMode::Mvpr).unwrap();
        let tape = Tape::new();
        let (_, base2) = total_loss(&tape, &cache, &labeled, &w, TrainMode::Baseline2).unwrap();
        assert_eq!(mvpr.l_label, base2.l_label);
        assert_eq!(mvpr.total, base2.total);
    }

    #[test]
    fn violation_rates_count_cells_beyond_tolerance() {
        let s1 = map(&[1.0, 0.0, 0.5, 0.2]);
        let s2 = map(&[0.5, 0.0, 0.9, 0.2]);
        let cache = cache_with(vec![s1, s2], vec![]);
        let rates = prediction_violation_rates(&cache, &[(1, 2)]);
        assert_eq!(rates, vec![0.25]); // only cell 0 violates; exact ties do not
    }
}
