//! Central finite-difference verification of recorded gradients.
//!
//! Every operator and loss is checked by comparing backward gradients
//! against `(f(x+h) - f(x-h)) / 2h` at h = 1e-5 in 64-bit. Inputs are drawn
//! away from subgradient kinks (relu/abs zeros, ranking ties, pooling ties)
//! so the comparison is meaningful.

use rand::Rng;

use crate::error::Result;
use crate::rng::rng_from;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Outcome of checking one operator or loss.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub elements: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Checks the gradient of `build` (a scalar-valued function of `inputs`,
/// expressed as tape operations over the given leaves) against central
/// differences in every input element.
pub fn check_scalar_fn(
    name: &str,
    inputs: &[Tensor],
    build: impl Fn(&Tape, &[Tensor]) -> Result<Tensor>,
) -> Result<CheckReport> {
    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Tensor> = values.iter().map(|v| tape.leaf(v)).collect();
        Ok(build(&tape, &leaves)?.item())
    };

    // Analytic gradients from one recorded pass.
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|v| tape.leaf(v)).collect();
    let root = build(&tape, &leaves)?;
    let grads = tape.backward(&root)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|l| grads.grad_of(l)).collect();

    let mut max_err: f64 = 0.0;
    let mut elements = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let base = input.data()[e];
            work[i].data_mut()[e] = base + STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = base - STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = base;
            let numeric = (plus - minus) / (2.0 * STEP);
            max_err = max_err.max(rel_err(analytic[i].data()[e], numeric));
            elements += 1;
        }
    }
    Ok(CheckReport { name: name.to_string(), max_rel_err: max_err, elements })
}

fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Random values with every element at least `margin` away from zero, so
/// relu/abs kinks are excluded.
fn random_tensor_off_zero(rng: &mut impl Rng, shape: Vec<usize>, margin: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.random_range(margin..1.0)
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// A pair (a, b) with |a - b| > margin elementwise, for ranking and maximum.
fn random_gapped_pair(rng: &mut impl Rng, shape: Vec<usize>, margin: f64) -> (Tensor, Tensor) {
    let n: usize = shape.iter().product();
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.random_range(-1.0..1.0);
        let gap = rng.random_range(margin..0.5);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        a.push(x);
        b.push(x + sign * gap);
    }
    (Tensor::new(shape.clone(), a).unwrap(), Tensor::new(shape, b).unwrap())
}

/// Pool inputs whose 2x2 windows have no near-ties.
fn random_pool_input(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Tensor {
    let n = c * h * w;
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 1e-2).collect();
    // Shuffle-ish perturbation keeps all pairwise gaps >= 5e-3.
    for v in data.iter_mut() {
        *v += rng.random_range(-2e-3..2e-3);
    }
    Tensor::new(vec![c, h, w], data).unwrap()
}

/// Finite-difference reports for every autodiff operator, at random shapes.
pub fn operator_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = rng_from(seed, &[0x6f70]);
    let mut reports = Vec::new();

    let shape = vec![3, 4];
    let (a, b) = random_gapped_pair(&mut rng, shape.clone(), 1e-3);
    reports.push(check_scalar_fn("add", &[a.clone(), b.clone()], |t, xs| {
        let s = t.add(&xs[0], &xs[1])?;
        let s = t.mul(&s, &s)?;
        t.mean(&s)
    })?);
    reports.push(check_scalar_fn("sub", &[a.clone(), b.clone()], |t, xs| {
        let s = t.sub(&xs[0], &xs[1])?;
        let s = t.mul(&s, &s)?;
        t.mean(&s)
    })?);
    reports.push(check_scalar_fn("mul", &[a.clone(), b.clone()], |t, xs| {
        let s = t.mul(&xs[0], &xs[1])?;
        t.sum(&s)
    })?);
    reports.push(check_scalar_fn("maximum", &[a.clone(), b.clone()], |t, xs| {
        let s = t.maximum(&xs[0], &xs[1])?;
        let s = t.mul(&s, &s)?;
        t.sum(&s)
    })?);
    reports.push(check_scalar_fn("add_scalar", &[a.clone()], |t, xs| {
        let s = t.add_scalar(&xs[0], 0.375)?;
        let s = t.mul(&s, &s)?;
        t.mean(&s)
    })?);
    reports.push(check_scalar_fn("mul_scalar", &[a.clone()], |t, xs| {
        let s = t.mul_scalar(&xs[0], -1.75)?;
        t.sum(&s)
    })?);

    let x = random_tensor_off_zero(&mut rng, vec![2, 3, 3], 1e-3);
    reports.push(check_scalar_fn("relu", &[x.clone()], |t, xs| {
        let s = t.relu(&xs[0])?;
        let s = t.mul(&s, &s)?;
        t.sum(&s)
    })?);
    reports.push(check_scalar_fn("abs", &[x.clone()], |t, xs| {
        let s = t.abs(&xs[0])?;
        t.mean(&s)
    })?);
    reports.push(check_scalar_fn("sum", &[x.clone()], |t, xs| t.sum(&xs[0]))?);
    reports.push(check_scalar_fn("mean", &[x.clone()], |t, xs| t.mean(&xs[0]))?);
    reports.push(check_scalar_fn("reshape", &[x.clone()], |t, xs| {
        let s = t.reshape(&xs[0], vec![9, 2])?;
        let s = t.mul(&s, &s)?;
        t.mean(&s)
    })?);

    let p1 = random_tensor(&mut rng, vec![2, 3, 4]);
    let p2 = random_tensor(&mut rng, vec![1, 3, 4]);
    reports.push(check_scalar_fn("concat_channels", &[p1, p2], |t, xs| {
        let s = t.concat_channels(&[&xs[0], &xs[1]])?;
        let s = t.mul(&s, &s)?;
        t.mean(&s)
    })?);

    let pool_in = random_pool_input(&mut rng, 2, 4, 6);
    reports.push(check_scalar_fn("max_pool2", &[pool_in], |t, xs| {
        let s = t.max_pool2(&xs[0])?;
        let s = t.mul(&s, &s)?;
        t.sum(&s)
    })?);

    let conv_in = random_tensor(&mut rng, vec![2, 5, 5]);
    let conv_k = random_tensor(&mut rng, vec![3, 2, 3, 3]);
    let conv_b = random_tensor(&mut rng, vec![3]);
    reports.push(check_scalar_fn("conv2d", &[conv_in, conv_k, conv_b], |t, xs| {
        let s = t.conv2d(&xs[0], &xs[1], &xs[2])?;
        let s = t.mul(&s, &s)?;
        t.mean(&s)
    })?);

    let gs_in = random_tensor(&mut rng, vec![2, 5, 6]);
    let mut grid_vals = Vec::new();
    for _ in 0..(4 * 3) {
        grid_vals.push(rng.random_range(-0.5..4.5)); // row, some outside
        grid_vals.push(rng.random_range(-0.5..5.5)); // col
    }
    let grid = Tensor::new(vec![4, 3, 2], grid_vals).unwrap();
    reports.push(check_scalar_fn("grid_sample", &[gs_in], move |t, xs| {
        let s = t.grid_sample(&xs[0], &grid)?;
        let s = t.mul(&s, &s)?;
        t.mean(&s)
    })?);

    Ok(reports)
}

fn leaf_cache(density: Vec<Tensor>, uncertainty: Vec<Tensor>) -> crate::model::ForwardCache {
    let k = density.len().max(uncertainty.len());
    crate::model::ForwardCache {
        permutation: (0..k).collect(),
        features: vec![],
        projected: vec![],
        fused: vec![],
        hidden: vec![],
        density,
        uncertainty,
    }
}

fn leaf_sample(
    gt: Tensor,
    coverage: Vec<Tensor>,
    labeled: bool,
) -> crate::scene::MultiViewSample {
    crate::scene::MultiViewSample { views: vec![], cameras: vec![], gt_density: gt, coverage, labeled }
}

fn random_mask(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| if rng.random_bool(0.7) { 1.0 } else { 0.0 }).collect();
    Tensor::new(shape, data).unwrap()
}

/// A chain of k maps where consecutive entries differ by at least `margin`
/// in every cell, keeping ranking hinges away from their kinks.
fn gapped_chain(rng: &mut impl Rng, k: usize, shape: Vec<usize>, margin: f64) -> Vec<Tensor> {
    let mut chain = vec![random_tensor(rng, shape.clone())];
    for _ in 1..k {
        let prev = chain.last().unwrap().clone();
        let next = prev.map(|x| x); // placeholder to keep shape
        let mut data = next.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            let gap = rng.random_range(margin..0.4);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            *v = prev.data()[i] + sign * gap;
        }
        chain.push(Tensor::new(shape.clone(), data).unwrap());
    }
    chain
}

/// Finite-difference reports for every loss function, differentiated with
/// respect to the maps they consume (kink-excluded inputs).
pub fn loss_suite(seed: u64) -> Result<Vec<CheckReport>> {
    use crate::losses;

    let mut rng = rng_from(seed, &[0x1055]);
    let mut reports = Vec::new();
    let shape = vec![6, 6];
    let k = 3;
    let weights = losses::LossWeights::for_k(k);

    let gt = random_tensor(&mut rng, shape.clone()).map(f64::abs);
    let coverage: Vec<Tensor> = (0..k).map(|_| random_mask(&mut rng, shape.clone())).collect();

    let density = gapped_chain(&mut rng, k, shape.clone(), 1e-3);
    {
        let sample = leaf_sample(gt.clone(), coverage.clone(), true);
        let w = weights.clone();
        reports.push(check_scalar_fn("loss_label", &density, move |t, xs| {
            let cache = leaf_cache(xs.to_vec(), vec![]);
            losses::loss_label(t, &cache, &sample, &w)
        })?);
    }

    let (a, b) = random_gapped_pair(&mut rng, shape.clone(), 1e-3);
    reports.push(check_scalar_fn("rank_penalty", &[a, b], |t, xs| {
        losses::rank_penalty(t, &xs[0], &xs[1])
    })?);

    {
        let w = weights.clone();
        reports.push(check_scalar_fn("loss_pre_rank", &density, move |t, xs| {
            let cache = leaf_cache(xs.to_vec(), vec![]);
            losses::loss_pre_rank(t, &cache, &w)
        })?);
    }

    let uncertainty = gapped_chain(&mut rng, k, shape.clone(), 1e-3);
    {
        let targets: Vec<Tensor> =
            (0..k).map(|_| random_tensor(&mut rng, shape.clone()).map(f64::abs)).collect();
        reports.push(check_scalar_fn("loss_un_label", &uncertainty, move |t, xs| {
            let cache = leaf_cache(vec![], xs.to_vec());
            losses::loss_un_label(t, &cache, &targets)
        })?);
    }

    {
        let sample = leaf_sample(gt.clone(), coverage.clone(), false);
        let w = weights.clone();
        reports.push(check_scalar_fn("loss_un_rank", &uncertainty, move |t, xs| {
            let cache = leaf_cache(vec![], xs.to_vec());
            losses::loss_un_rank(t, &cache, &sample, &w)
        })?);
    }

    {
        let sample = leaf_sample(gt.clone(), coverage.clone(), false);
        let w = losses::LossWeights { mean_over_mask: true, ..weights.clone() };
        reports.push(check_scalar_fn("loss_un_rank_mask_mean", &uncertainty, move |t, xs| {
            let cache = leaf_cache(vec![], xs.to_vec());
            losses::loss_un_rank(t, &cache, &sample, &w)
        })?);
    }

    Ok(reports)
}

fn micro_model() -> (crate::model::ModelParams, Vec<Tensor>, Vec<Tensor>) {
    use crate::model::{init_model, ModelConfig};
    let cfg = ModelConfig {
        extractor_channels: vec![4, 8],
        base_channels: 8,
        k: 2,
        ..Default::default()
    };
    let params = init_model(&cfg, 41).unwrap();
    let mut rng = rng_from(41, &[0xce7]);
    let views: Vec<Tensor> = (0..2)
        .map(|_| {
            let data = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
            Tensor::new(vec![1, 8, 8], data).unwrap()
        })
        .collect();
    let grids: Vec<Tensor> = (0..2)
        .map(|_| {
            let mut data = Vec::new();
            for _ in 0..36 {
                data.push(rng.random_range(0.0..3.0));
                data.push(rng.random_range(0.0..3.0));
            }
            Tensor::new(vec![6, 6, 2], data).unwrap()
        })
        .collect();
    (params, views, grids)
}

/// End-to-end gradient checks: each training objective differentiated with
/// respect to every network parameter of a micro model.
pub fn pipeline_suite(seed: u64) -> Result<Vec<CheckReport>> {
    use crate::losses::{self, LossWeights, TrainMode};
    use crate::model::{forward_all, ModelParams};

    let (params, views, grids) = micro_model();
    let mut rng = rng_from(seed, &[0x9199]);
    let shape = vec![6, 6];
    let gt = random_tensor(&mut rng, shape.clone()).map(f64::abs);
    let coverage: Vec<Tensor> = (0..2).map(|_| random_mask(&mut rng, shape.clone())).collect();
    let weights = LossWeights { beta: 1.0, eta: 1.0, gamma: 1.0, ..LossWeights::for_k(2) };

    let mut base: Vec<Tensor> = Vec::new();
    params.visit(|_, t| base.push(t.clone()));
    let rebuild = |leaves: &[Tensor]| -> ModelParams {
        let mut p = params.clone();
        for ((_, slot), leaf) in p.named_mut().into_iter().zip(leaves) {
            *slot = leaf.clone();
        }
        p
    };

    let mut reports = Vec::new();
    {
        let sample = leaf_sample(gt.clone(), coverage.clone(), true);
        let (views, grids, w) = (views.clone(), grids.clone(), weights.clone());
        let rebuild = &rebuild;
        reports.push(check_scalar_fn("pipeline_label_loss", &base, move |t, xs| {
            let p = rebuild(xs);
            let cache = forward_all(t, &p, &views, &grids, &[0, 1], false)?;
            losses::loss_label(t, &cache, &sample, &w)
        })?);
    }
    {
        let sample = leaf_sample(gt.clone(), coverage.clone(), false);
        let (views, grids, w) = (views.clone(), grids.clone(), weights.clone());
        let rebuild = &rebuild;
        reports.push(check_scalar_fn("pipeline_mvpr_unlabeled", &base, move |t, xs| {
            let p = rebuild(xs);
            let cache = forward_all(t, &p, &views, &grids, &[1, 0], false)?;
            let (total, _) = losses::total_loss(t, &cache, &sample, &w, TrainMode::Mvpr)?;
            Ok(total)
        })?);
    }
    {
        // Uncertainty targets are supervision constants; freeze them at the
        // base parameters so the comparison respects the detachment.
        let tape = Tape::new();
        let cache = forward_all(&tape, &params, &views, &grids, &[0, 1], true)?;
        let sample = leaf_sample(gt.clone(), coverage.clone(), true);
        let frozen = losses::uncertainty_targets(&cache, &sample)?;
        let (views, grids, w) = (views.clone(), grids.clone(), weights.clone());
        let rebuild = &rebuild;
        reports.push(check_scalar_fn("pipeline_mvur_labeled", &base, move |t, xs| {
            let p = rebuild(xs);
            let cache = forward_all(t, &p, &views, &grids, &[0, 1], true)?;
            let label = losses::loss_label(t, &cache, &sample, &w)?;
            let un = losses::loss_un_label(t, &cache, &frozen)?;
            t.add(&label, &t.mul_scalar(&un, w.eta)?)
        })?);
    }
    {
        let sample = leaf_sample(gt.clone(), coverage.clone(), false);
        let (views, grids, w) = (views, grids, weights);
        let rebuild = &rebuild;
        reports.push(check_scalar_fn("pipeline_mvur_unlabeled", &base, move |t, xs| {
            let p = rebuild(xs);
            let cache = forward_all(t, &p, &views, &grids, &[0, 1], true)?;
            let (total, _) = losses::total_loss(t, &cache, &sample, &w, TrainMode::Mvur)?;
            Ok(total)
        })?);
    }
    Ok(reports)
}

/// Every operator, loss, and pipeline check.
pub fn full_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = operator_suite(seed)?;
    reports.extend(loss_suite(seed)?);
    reports.extend(pipeline_suite(seed)?);
    Ok(reports)
}
