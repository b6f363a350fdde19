//! Semi-supervised training: labeled warm-up followed by one of three
//! labeled/unlabeled scheduling strategies, with per-iteration loss logging,
//! per-epoch evaluation, and ranking-violation tracking on a fixed probe
//! set.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LoadedFrame, Split};
use crate::error::{Error, Result};
use crate::losses::{
    self, LossReport, LossWeights, TrainMode,
};
use crate::metrics::{evaluate_frames, MetricsReport};
use crate::model::{forward_all, init_model, ForwardCache, ModelConfig, ModelParams};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::rng_from;
use crate::scene::{GridSpec, MultiViewSample};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[serde(alias = "randomselection")]
    Random,
    #[serde(alias = "fixedalternative")]
    Fixed,
    Simultaneous,
}

impl Schedule {
    pub fn table_name(self) -> &'static str {
        match self {
            Schedule::Random => "RandomSelection",
            Schedule::Fixed => "FixedAlternative",
            Schedule::Simultaneous => "Simultaneous",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSeeds {
    pub split: u64,
    pub init: u64,
    pub schedule: u64,
}

impl Default for TrainSeeds {
    fn default() -> Self {
        TrainSeeds { split: 1, init: 2, schedule: 3 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub schedule: Schedule,
    /// Percentage of train frames treated as labeled.
    pub label_rate: f64,
    /// Labeled-only epochs before the semi-supervised phase.
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seeds: TrainSeeds,
    /// Size of the fixed unlabeled probe set used for violation tracking.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Mvpr,
            schedule: Schedule::Random,
            label_rate: 10.0,
            warmup_epochs: 5,
            epochs: 12,
            // The paper fine-tunes a pretrained backbone at 1e-5; this toy
            // network trains from scratch.
            lr: 1e-3,
            batch_size: 1,
            weights: LossWeights::for_k(3),
            seeds: TrainSeeds::default(),
            probe_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.label_rate > 0.0 && self.label_rate <= 100.0) {
            return Err(Error::Config(format!(
                "label_rate must be in (0, 100], got {}",
                self.label_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        self.weights.validate(k)
    }
}

/// Which split(s) an iteration consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Labeled,
    Unlabeled,
    Both,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Labeled => "labeled",
            Branch::Unlabeled => "unlabeled",
            Branch::Both => "both",
        }
    }
}

/// Post-warm-up branch selection. `parity` counts post-warm-up iterations
/// for the fixed alternative schedule (even = labeled).
pub fn next_branch(schedule: Schedule, parity: usize, rng: &mut ChaCha12Rng) -> Branch {
    match schedule {
        Schedule::Random => {
            if rng.random_bool(0.5) {
                Branch::Labeled
            } else {
                Branch::Unlabeled
            }
        }
        Schedule::Fixed => {
            if parity % 2 == 0 {
                Branch::Labeled
            } else {
                Branch::Unlabeled
            }
        }
        Schedule::Simultaneous => Branch::Both,
    }
}

/// Partitions the train split into labeled and unlabeled frame lists using
/// the same per-scene shuffle as dataset generation.
pub fn split_labels(
    dataset: &Dataset,
    label_rate: f64,
    seed: u64,
) -> Result<(Vec<crate::dataset::FrameId>, Vec<crate::dataset::FrameId>)> {
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for scene in &dataset.manifest.scenes {
        let train_frames: Vec<usize> = scene
            .frames
            .iter()
            .enumerate()
            .filter(|(_, f)| f.split == Split::Train)
            .map(|(i, _)| i)
            .collect();
        let flags = crate::dataset::label_flags(train_frames.len(), label_rate, seed, scene.id)?;
        for (&frame, &flag) in train_frames.iter().zip(&flags) {
            let id = crate::dataset::FrameId { scene: scene.id, frame };
            if flag {
                labeled.push(id);
            } else {
                unlabeled.push(id);
            }
        }
    }
    Ok((labeled, unlabeled))
}

/// One per-iteration log row.
#[derive(Clone, Debug)]
pub struct IterRow {
    pub iter: usize,
    pub epoch: usize,
    pub branch: Branch,
    pub report: LossReport,
}

/// Per-epoch evaluation row: test metrics plus mean probe-set violation
/// rates per ranking pair.
#[derive(Clone, Debug)]
pub struct EpochRow {
    pub epoch: usize,
    pub metrics: MetricsReport,
    pub pred_violations: Vec<f64>,
    pub unc_violations: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub iters: Vec<IterRow>,
    pub epochs: Vec<EpochRow>,
    pub rank_pairs: Vec<(usize, usize)>,
}

impl TrainLog {
    pub fn write_iter_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        write!(w, "iter,epoch,branch,l_label,l_pre_rank,l_un_label,l_un_rank,total")?;
        for (j1, j2) in &self.rank_pairs {
            write!(w, ",violation_rate_pair_{j1}_{j2}")?;
        }
        writeln!(w)?;
        for row in &self.iters {
            write!(
                w,
                "{},{},{},{},{},{},{},{}",
                row.iter,
                row.epoch,
                row.branch.name(),
                row.report.l_label,
                row.report.l_pre_rank,
                row.report.l_un_label,
                row.report.l_un_rank,
                row.report.total
            )?;
            for i in 0..self.rank_pairs.len() {
                let v = row.report.violation_rates.get(i).copied().unwrap_or(0.0);
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn write_epoch_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        write!(w, "epoch,mae,mse,nae,game0,game1,game2")?;
        for (j1, j2) in &self.rank_pairs {
            write!(w, ",pred_viol_pair_{j1}_{j2}")?;
        }
        for (j1, j2) in &self.rank_pairs {
            write!(w, ",unc_viol_pair_{j1}_{j2}")?;
        }
        writeln!(w)?;
        for row in &self.epochs {
            write!(
                w,
                "{},{},{},{},{},{},{}",
                row.epoch,
                row.metrics.mae,
                row.metrics.mse,
                row.metrics.nae,
                row.metrics.game[0],
                row.metrics.game[1],
                row.metrics.game[2]
            )?;
            for v in &row.pred_violations {
                write!(w, ",{v}")?;
            }
            for v in &row.unc_violations {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Sidecar manifest written next to every checkpoint container.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub epoch: usize,
    pub k: usize,
    pub grid: GridSpec,
    pub model: ModelConfig,
}

/// Writes `<stem>.mvct` and `<stem>.toml`.
pub fn save_checkpoint(
    params: &ModelParams,
    grid: &GridSpec,
    epoch: usize,
    config_hash: &str,
    stem: &Path,
) -> Result<()> {
    let container_path = stem.with_extension("mvct");
    params.to_container().save(&container_path)?;
    let manifest = CheckpointManifest {
        format_version: 1,
        config_hash: config_hash.to_string(),
        epoch,
        k: params.config.k,
        grid: *grid,
        model: params.config.clone(),
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::Data(format!("checkpoint manifest serialization failed: {e}")))?;
    let manifest_path = stem.with_extension("toml");
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(stem: &Path) -> Result<(ModelParams, CheckpointManifest)> {
    let manifest_path = stem.with_extension("toml");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CheckpointManifest = toml::from_str(&text)
        .map_err(|e| Error::Data(format!("bad checkpoint manifest: {e}")))?;
    let container = crate::container::Container::load(stem.with_extension("mvct"))?;
    let params = ModelParams::from_container(&manifest.model, &container)?;
    Ok((params, manifest))
}

/// Does this (mode, label state, phase) combination contribute any loss
/// term? Steps without terms draw the same random numbers but skip the
/// forward pass and the optimizer update entirely.
fn contributes(mode: TrainMode, labeled: bool, warm: bool, w: &LossWeights) -> bool {
    if labeled {
        return true;
    }
    if warm {
        return false;
    }
    match mode {
        TrainMode::Baseline1 | TrainMode::Baseline2 => false,
        TrainMode::Mvpr => w.beta > 0.0,
        TrainMode::Mvur => w.gamma > 0.0,
    }
}

fn warmup_loss(
    tape: &Tape,
    cache: &ForwardCache,
    sample: &MultiViewSample,
    w: &LossWeights,
    mode: TrainMode,
) -> Result<(Tensor, LossReport)> {
    let label = match mode {
        TrainMode::Baseline1 => {
            let zero_lambda = LossWeights { lambda_aux: 0.0, ..w.clone() };
            losses::loss_label(tape, cache, sample, &zero_lambda)?
        }
        _ => losses::loss_label(tape, cache, sample, w)?,
    };
    let report = LossReport {
        l_label: label.item(),
        total: label.item(),
        violation_rates: losses::prediction_violation_rates(cache, &w.rank_pairs),
        ..Default::default()
    };
    Ok((label, report))
}

/// One optimizer step over the given (sample, grids, permutation) inputs:
/// a single entry for the labeled/unlabeled branches, two entries for
/// simultaneous training (losses summed before the update). Inputs without
/// applicable loss terms are skipped; if none apply the parameters are left
/// untouched.
pub fn train_step(
    params: &mut ModelParams,
    adam: &mut AdamState,
    w: &LossWeights,
    mode: TrainMode,
    warm: bool,
    inputs: &[(&MultiViewSample, &[Tensor], &[usize])],
) -> Result<LossReport> {
    let with_uncertainty = mode == TrainMode::Mvur && !warm;
    let active: Vec<_> = inputs
        .iter()
        .filter(|(sample, _, _)| contributes(mode, sample.labeled, warm, w))
        .collect();
    if active.is_empty() {
        return Ok(LossReport::default());
    }

    let tape = Tape::new();
    let leaves = params.register_on(&tape);
    let mut combined = LossReport::default();
    let mut total: Option<Tensor> = None;
    for (sample, grids, permutation) in active {
        let cache = forward_all(&tape, &leaves, &sample.views, grids, permutation, with_uncertainty)?;
        let (loss, report) = if warm {
            warmup_loss(&tape, &cache, sample, w, mode)?
        } else {
            losses::total_loss(&tape, &cache, sample, w, mode)?
        };
        combined.l_label += report.l_label;
        combined.l_pre_rank += report.l_pre_rank;
        combined.l_un_label += report.l_un_label;
        combined.l_un_rank += report.l_un_rank;
        combined.total += report.total;
        combined.violation_rates = report.violation_rates;
        if loss.is_on_tape() {
            total = Some(match total {
                Some(acc) => tape.add(&acc, &loss)?,
                None => loss,
            });
        }
    }
    if !combined.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite training loss: {:?}",
            combined
        )));
    }
    let Some(total) = total else {
        return Ok(combined);
    };

    let grads = tape.backward(&total)?;
    let mut grad_map: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    leaves.visit(|name, leaf| {
        let g = match grads.get(leaf) {
            Some(g) => g.to_vec(),
            // Disconnected from this step's loss; mathematically zero.
            None => vec![0.0; leaf.numel()],
        };
        grad_map.insert(name.to_string(), g);
    });
    adam.step(&mut params.named_mut(), &grad_map)?;
    Ok(combined)
}

/// Training artifacts returned to the caller.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrainLog,
}

fn draw_permutation(k: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..k).collect();
    perm.shuffle(rng);
    perm
}

fn mean_per_pair(rates: &[Vec<f64>], pairs: usize) -> Vec<f64> {
    if rates.is_empty() {
        return vec![0.0; pairs];
    }
    let mut out = vec![0.0; pairs];
    for r in rates {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o /= rates.len() as f64;
    }
    out
}

/// Runs the full semi-supervised training loop. Deterministic given the
/// dataset and every seed in the config. When `out_dir` is given, the
/// checkpoint and both log CSVs are rewritten after every epoch.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
    config_hash: &str,
) -> Result<TrainOutcome> {
    cfg.validate(model_cfg.k)?;
    model_cfg.validate()?;
    if model_cfg.k != dataset.k() {
        return Err(Error::Config(format!(
            "model expects {} views but the dataset has {}",
            model_cfg.k,
            dataset.k()
        )));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let grids = dataset.sampling_grids(model_cfg.feature_stride())?;
    let (labeled_ids, unlabeled_ids) = split_labels(dataset, cfg.label_rate, cfg.seeds.split)?;
    let labeled: Vec<LoadedFrame> = labeled_ids
        .iter()
        .map(|&id| {
            let mut f = dataset.load_frame(id)?;
            f.sample.labeled = true;
            Ok(f)
        })
        .collect::<Result<_>>()?;
    let unlabeled: Vec<LoadedFrame> = unlabeled_ids
        .iter()
        .map(|&id| {
            let mut f = dataset.load_frame(id)?;
            f.sample.labeled = false;
            Ok(f)
        })
        .collect::<Result<_>>()?;
    let test = dataset.load_split(Split::Test)?;
    if test.is_empty() {
        return Err(Error::Config("dataset has no test split to evaluate on".into()));
    }

    // Fixed unlabeled probe set for violation tracking, chosen once per run.
    let probe: Vec<&LoadedFrame> = {
        let mut order: Vec<usize> = (0..unlabeled.len()).collect();
        let mut rng = rng_from(cfg.seeds.split, &[0x9c0b]);
        order.shuffle(&mut rng);
        order.truncate(cfg.probe_size);
        order.into_iter().map(|i| &unlabeled[i]).collect()
    };

    let mut params = init_model(model_cfg, cfg.seeds.init)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut schedule_rng = rng_from(cfg.seeds.schedule, &[0x5eed]);
    let iters_per_epoch = labeled.len() + unlabeled.len();
    let mut log = TrainLog { rank_pairs: cfg.weights.rank_pairs.clone(), ..Default::default() };

    let mut iter = 0usize;
    let mut post_warmup_iter = 0usize;
    for epoch in 1..=cfg.epochs {
        let warm = epoch <= cfg.warmup_epochs;
        for _ in 0..iters_per_epoch {
            let branch = if warm || unlabeled.is_empty() {
                Branch::Labeled
            } else {
                let b = next_branch(cfg.schedule, post_warmup_iter, &mut schedule_rng);
                post_warmup_iter += 1;
                b
            };
            let mut picks: Vec<(&LoadedFrame, Vec<usize>)> = Vec::with_capacity(2);
            match branch {
                Branch::Labeled => {
                    let idx = schedule_rng.random_range(0..labeled.len());
                    let perm = draw_permutation(model_cfg.k, &mut schedule_rng);
                    picks.push((&labeled[idx], perm));
                }
                Branch::Unlabeled => {
                    let idx = schedule_rng.random_range(0..unlabeled.len());
                    let perm = draw_permutation(model_cfg.k, &mut schedule_rng);
                    picks.push((&unlabeled[idx], perm));
                }
                Branch::Both => {
                    let li = schedule_rng.random_range(0..labeled.len());
                    let lperm = draw_permutation(model_cfg.k, &mut schedule_rng);
                    picks.push((&labeled[li], lperm));
                    let ui = schedule_rng.random_range(0..unlabeled.len());
                    let uperm = draw_permutation(model_cfg.k, &mut schedule_rng);
                    picks.push((&unlabeled[ui], uperm));
                }
            }
            let inputs: Vec<(&MultiViewSample, &[Tensor], &[usize])> = picks
                .iter()
                .map(|(f, perm)| {
                    (&f.sample, grids[f.id.scene].as_slice(), perm.as_slice())
                })
                .collect();
            let report = train_step(&mut params, &mut adam, &cfg.weights, cfg.mode, warm, &inputs)
                .map_err(|e| match e {
                    Error::Numeric(msg) => {
                        Error::Numeric(format!("epoch {epoch}, iteration {iter}: {msg}"))
                    }
                    other => other,
                })?;
            log.iters.push(IterRow { iter, epoch, branch, report });
            iter += 1;
        }

        // Per-epoch evaluation and probe-set violation tracking.
        let metrics = evaluate_frames(&params, &test, &grids)?;
        let identity: Vec<usize> = (0..model_cfg.k).collect();
        let mut pred_rates = Vec::with_capacity(probe.len());
        let mut unc_rates = Vec::with_capacity(probe.len());
        for frame in &probe {
            let tape = Tape::new();
            let cache = forward_all(
                &tape,
                &params,
                &frame.sample.views,
                &grids[frame.id.scene],
                &identity,
                true,
            )?;
            pred_rates.push(losses::prediction_violation_rates(&cache, &cfg.weights.rank_pairs));
            unc_rates.push(losses::uncertainty_violation_rates(
                &cache,
                &frame.sample,
                &cfg.weights.rank_pairs,
            )?);
        }
        log.epochs.push(EpochRow {
            epoch,
            metrics,
            pred_violations: mean_per_pair(&pred_rates, cfg.weights.rank_pairs.len()),
            unc_violations: mean_per_pair(&unc_rates, cfg.weights.rank_pairs.len()),
        });

        if let Some(dir) = out_dir {
            save_checkpoint(&params, dataset.grid(), epoch, config_hash, &dir.join("checkpoint"))?;
            let iter_path = dir.join("train_log.csv");
            let mut buf = Vec::new();
            log.write_iter_csv(&mut buf).map_err(|e| Error::io(&iter_path, e))?;
            fs::write(&iter_path, buf).map_err(|e| Error::io(&iter_path, e))?;
            let epoch_path = dir.join("epoch_log.csv");
            let mut buf = Vec::new();
            log.write_epoch_csv(&mut buf).map_err(|e| Error::io(&epoch_path, e))?;
            fs::write(&epoch_path, buf).map_err(|e| Error::io(&epoch_path, e))?;
        }
    }

    Ok(TrainOutcome { params, log })
}
