//! Dual-Path Shifting Loss training.
//!
//! Each batch element holds a pair of horizons `(t_i, t_j)` of one segment,
//! one noise level `s` and one ε draw per horizon. Four ε-MSE terms are
//! summed with uniform weight: the standard path for each horizon, and the
//! shifted path that reuses one horizon's noisy state and regresses it
//! toward the other horizon's clean map.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointManifest, FORMAT_VERSION};
use crate::config::{ExperimentConfig, PairSampling, TrainConfig};
use crate::error::{ensure, Error, Result};
use crate::eval::{evaluate_split, QualityMetrics};
use crate::grid::Grid;
use crate::ingest::{Segment, Split};
use crate::model::{ConditioningContext, DenoiserState, NoiseQuery, Tape};
use crate::rng::{self, standard_normal_grid, StreamRng};
use crate::sample::SamplerKind;
use crate::schedule::{forward_noise, NoiseSchedule};
use crate::treeplan::TreePlan;

/// One training example: a horizon pair of one segment.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub cond: ConditioningContext,
    pub t_i: usize,
    pub t_j: usize,
    pub clean_i: Grid,
    pub clean_j: Grid,
    /// Shared noise level `s ∈ [1, D_train]`.
    pub level: usize,
    /// Noise of the `t_i`-rooted noisy state.
    pub eps_i: Grid,
    /// Noise of the `t_j`-rooted noisy state.
    pub eps_j: Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1_i: f64,
    pub l1_j: f64,
    pub l2_ij: f64,
    pub l2_ji: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l1_i: f64, l1_j: f64, l2_ij: f64, l2_ji: f64) -> Self {
        LossBreakdown {
            l1_i,
            l1_j,
            l2_ij,
            l2_ji,
            total: l1_i + l1_j + l2_ij + l2_ji,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l1_i, self.l1_j, self.l2_ij, self.l2_ji, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown::new(avg(|l| l.l1_i), avg(|l| l.l1_j), avg(|l| l.l2_ij), avg(|l| l.l2_ji))
    }
}

/// Which shifted term: the `t_i`-rooted state regressed toward `t_j`, or
/// the reverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    IToJ,
    JToI,
}

/// Mean of squared differences.
pub fn mse(a: &Grid, b: &Grid) -> f64 {
    let n = a.len() as f64;
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// Shifted-path regression target as written:
/// `(noisy − √ᾱ_s · clean_other) / √(1 − ᾱ_s)`.
pub fn shifted_target(noisy: &Grid, clean_other: &Grid, alpha_bar: f64) -> Result<Grid> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    noisy.zip_with(clean_other, |x, c| (x - a * c) / b)
}

/// The same target expanded with `noisy = √ᾱ·clean_own + √(1−ᾱ)·ε`:
/// `ε + √ᾱ/√(1−ᾱ) · (clean_own − clean_other)`. Equal pairs give exactly ε.
pub fn shifted_target_from_noise(
    eps: &Grid,
    clean_own: &Grid,
    clean_other: &Grid,
    alpha_bar: f64,
) -> Result<Grid> {
    clean_own.check_shape(clean_other)?;
    eps.check_shape(clean_own)?;
    let k = alpha_bar.sqrt() / (1.0 - alpha_bar).sqrt();
    let data = eps
        .as_slice()
        .iter()
        .zip(clean_own.as_slice().iter().zip(clean_other.as_slice()))
        .map(|(e, (o, c))| e + k * (o - c))
        .collect();
    Grid::from_vec(eps.height(), eps.width(), data)
}

struct Term {
    noisy_from_i: bool,
    horizon: usize,
    shift: i64,
    target: Grid,
}

impl TrainBatch {
    pub fn validate(&self, state: &DenoiserState, schedule: &NoiseSchedule) -> Result<()> {
        let h = state.config().horizons;
        ensure!(
            self.t_i < h && self.t_j < h,
            "pair ({}, {}) outside {h} horizons",
            self.t_i,
            self.t_j
        );
        ensure!(
            (1..=schedule.steps()).contains(&self.level),
            "noise level {} outside [1, {}]",
            self.level,
            schedule.steps()
        );
        for g in [&self.clean_j, &self.eps_i, &self.eps_j] {
            self.clean_i.check_shape(g)?;
        }
        Ok(())
    }

    fn noisy(&self, schedule: &NoiseSchedule) -> Result<(Grid, Grid)> {
        Ok((
            forward_noise(&self.clean_i, self.level, schedule, &self.eps_i)?,
            forward_noise(&self.clean_j, self.level, schedule, &self.eps_j)?,
        ))
    }

    fn shift_ij(&self) -> i64 {
        self.t_j as i64 - self.t_i as i64
    }

    /// The four terms in `[l1_i, l1_j, l2_ij, l2_ji]` order.
    fn terms(&self, schedule: &NoiseSchedule) -> Result<[Term; 4]> {
        let ab = schedule.alpha_bar(self.level);
        Ok([
            Term {
                noisy_from_i: true,
                horizon: self.t_i,
                shift: 0,
                target: self.eps_i.clone(),
            },
            Term {
                noisy_from_i: false,
                horizon: self.t_j,
                shift: 0,
                target: self.eps_j.clone(),
            },
            Term {
                noisy_from_i: true,
                horizon: self.t_j,
                shift: self.shift_ij(),
                target: shifted_target_from_noise(&self.eps_i, &self.clean_i, &self.clean_j, ab)?,
            },
            Term {
                noisy_from_i: false,
                horizon: self.t_i,
                shift: -self.shift_ij(),
                target: shifted_target_from_noise(&self.eps_j, &self.clean_j, &self.clean_i, ab)?,
            },
        ])
    }

    /// Short description for diagnostics.
    pub fn describe(&self) -> String {
        format!(
            "pair=({}, {}) level={} |eps_i|max={:.3e} cond_max={:.3e}",
            self.t_i,
            self.t_j,
            self.level,
            self.eps_i.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs())),
            self.cond.cond_map.max()
        )
    }
}

/// Standard-path loss for `t_i`: `mean((ε_i − ε̂(x_i, s, t_i, 0))²)`.
pub fn loss_standard(batch: &TrainBatch, state: &DenoiserState, schedule: &NoiseSchedule) -> Result<f64> {
    batch.validate(state, schedule)?;
    let noisy = forward_noise(&batch.clean_i, batch.level, schedule, &batch.eps_i)?;
    let pred = state.predict_noise(&noisy, &batch.cond, NoiseQuery::new(batch.level, batch.t_i, 0))?;
    Ok(mse(&batch.eps_i, &pred))
}

/// Shifted-path loss: the noisy state of one horizon, conditioned on the
/// other horizon and the offset between them.
pub fn loss_shifted(
    batch: &TrainBatch,
    state: &DenoiserState,
    schedule: &NoiseSchedule,
    direction: Direction,
) -> Result<f64> {
    batch.validate(state, schedule)?;
    let ab = schedule.alpha_bar(batch.level);
    let (eps, own, other, horizon, shift) = match direction {
        Direction::IToJ => (&batch.eps_i, &batch.clean_i, &batch.clean_j, batch.t_j, batch.shift_ij()),
        Direction::JToI => (&batch.eps_j, &batch.clean_j, &batch.clean_i, batch.t_i, -batch.shift_ij()),
    };
    let noisy = forward_noise(own, batch.level, schedule, eps)?;
    let target = shifted_target_from_noise(eps, own, other, ab)?;
    let pred = state.predict_noise(&noisy, &batch.cond, NoiseQuery::new(batch.level, horizon, shift))?;
    Ok(mse(&target, &pred))
}

/// All four DPSL terms and `∂total/∂θ` (scaled by `weight`).
pub fn dpsl_loss_and_grads(
    batch: &TrainBatch,
    state: &DenoiserState,
    schedule: &NoiseSchedule,
    weight: f64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    batch.validate(state, schedule)?;
    let (x_i, x_j) = batch.noisy(schedule)?;
    let mut grads = vec![0.0; state.num_params()];
    let mut losses = [0.0; 4];
    for (k, term) in batch.terms(schedule)?.into_iter().enumerate() {
        let noisy = if term.noisy_from_i { &x_i } else { &x_j };
        let q = NoiseQuery::new(batch.level, term.horizon, term.shift);
        let (pred, tape): (Grid, Tape) = state.forward_with_tape(noisy, &batch.cond, q)?;
        losses[k] = mse(&term.target, &pred);
        let scale = 2.0 * weight / pred.len() as f64;
        let d_out = pred.zip_with(&term.target, |p, t| scale * (p - t))?;
        state.backward(&tape, &d_out, &mut grads);
    }
    Ok((LossBreakdown::new(losses[0], losses[1], losses[2], losses[3]), grads))
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(num_params: usize) -> Self {
        Self::from_state(vec![0.0; num_params], vec![0.0; num_params], 0)
    }

    pub fn from_state(m: Vec<f64>, v: Vec<f64>, t: u64) -> Self {
        let d = TrainConfig::default();
        AdamW {
            m,
            v,
            t,
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.adam_eps,
            weight_decay: d.weight_decay,
        }
    }

    pub fn configured(mut self, cfg: &TrainConfig) -> Self {
        self.beta1 = cfg.beta1;
        self.beta2 = cfg.beta2;
        self.eps = cfg.adam_eps;
        self.weight_decay = cfg.weight_decay;
        self
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer state size");
        assert_eq!(grads.len(), self.m.len(), "gradient size");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *p -= lr * self.weight_decay * *p;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Cosine annealing from `lr_max` at step 0 toward `lr_min` at `total`.
pub fn cosine_lr(step: u64, total: u64, lr_max: f64, lr_min: f64) -> f64 {
    let frac = if total == 0 { 0.0 } else { step.min(total) as f64 / total as f64 };
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Averages the DPSL over `batches`, backpropagates and applies one
/// optimizer step. Nothing is updated when any loss is non-finite.
pub fn dpsl_step(
    batches: &[TrainBatch],
    state: &mut DenoiserState,
    optimizer: &mut AdamW,
    schedule: &NoiseSchedule,
    lr: f64,
    step: u64,
) -> Result<LossBreakdown> {
    ensure!(!batches.is_empty(), "empty batch");
    let weight = 1.0 / batches.len() as f64;
    let shared: &DenoiserState = state;
    let results: Vec<(LossBreakdown, Vec<f64>)> = batches
        .par_iter()
        .map(|b| dpsl_loss_and_grads(b, shared, schedule, weight))
        .collect::<Result<_>>()?;
    let losses: Vec<LossBreakdown> = results.iter().map(|r| r.0).collect();
    let mean = LossBreakdown::mean(&losses);
    let mut grads = vec![0.0; state.num_params()];
    for (_, g) in &results {
        for (acc, v) in grads.iter_mut().zip(g) {
            *acc += v;
        }
    }
    if !mean.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        let detail = batches
            .iter()
            .zip(&losses)
            .map(|(b, l)| format!("[{} losses={l:?}]", b.describe()))
            .collect::<Vec<_>>()
            .join(" ");
        return Err(Error::NonFiniteLoss { step, detail });
    }
    optimizer.step(state.params_mut(), &grads, lr);
    Ok(mean)
}

/// Draws the horizon pair of one training example.
///
/// With probability `p_tree` a shifted pair: under [`PairSampling::Tree`]
/// a `(parent, child)` branch transition of `plan` with nonzero offset,
/// uniformly; under [`PairSampling::Uniform`] two distinct horizons.
/// Otherwise `t_i = t_j`, uniformly.
pub fn sample_pair(plan: &TreePlan, p_tree: f64, sampling: PairSampling, rng: &mut StreamRng) -> (usize, usize) {
    let h = plan.horizons;
    let shifted = rng.random::<f64>() < p_tree;
    if shifted && h > 1 {
        match sampling {
            PairSampling::Tree => {
                let transitions: Vec<(usize, usize)> = plan
                    .branch_transitions()
                    .into_iter()
                    .filter(|(p, c)| p != c)
                    .collect();
                if !transitions.is_empty() {
                    return transitions[rng.random_range(0..transitions.len())];
                }
            }
            PairSampling::Uniform => {
                let a = rng.random_range(0..h);
                let b = (a + rng.random_range(1..h)) % h;
                return (a, b);
            }
        }
    }
    let t = rng.random_range(0..h);
    (t, t)
}

/// Where [`train_loop`] writes, and what it resumes from.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// Receives `step-NNNNNNN/` periodic checkpoints and `best/`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Line-delimited JSON `{step, l1_i, l1_j, l2_ij, l2_ji, total, lr}`.
    pub metrics_log: Option<PathBuf>,
    /// Line-delimited JSON `{step, rmse, mae, kl}` per validation.
    pub validation_log: Option<PathBuf>,
    pub resume_from: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l1_i: f64,
    pub l1_j: f64,
    pub l2_ij: f64,
    pub l2_ji: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    /// Optimizer steps completed when validating.
    pub step: u64,
    pub rmse: f64,
    pub mae: f64,
    pub kl: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub start_step: u64,
    pub total_steps: u64,
    pub records: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
    pub best: Option<ValidationRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub state: DenoiserState,
}

/// Builds batch element `b` of optimizer step `step`.
#[allow(clippy::too_many_arguments)]
pub fn make_batch(
    dataset: &crate::storage::Dataset,
    segment: &Segment,
    plan: &TreePlan,
    cfg: &TrainConfig,
    d_train: usize,
    seed: u64,
    step: u64,
    b: usize,
) -> Result<TrainBatch> {
    let mut rng = rng::stream(seed, "train", &[step, b as u64]);
    let (t_i, t_j) = sample_pair(plan, cfg.p_tree, cfg.pair_sampling, &mut rng);
    let level = rng.random_range(1..=d_train);
    let (h, w) = dataset.resolution();
    let eps_i = standard_normal_grid(&mut rng, h, w);
    let eps_j = if cfg.share_noise {
        eps_i.clone()
    } else {
        standard_normal_grid(&mut rng, h, w)
    };
    Ok(TrainBatch {
        cond: ConditioningContext::new(dataset.condition(segment).clone())?,
        t_i,
        t_j,
        clean_i: dataset.target(segment, t_i).clone(),
        clean_j: dataset.target(segment, t_j).clone(),
        level,
        eps_i,
        eps_j,
    })
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "epoch", &[epoch]));
    order
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(file))
}

fn write_line<T: Serialize>(log: &mut Option<(PathBuf, BufWriter<File>)>, value: &T) -> Result<()> {
    if let Some((path, w)) = log {
        let line = serde_json::to_string(value)?;
        writeln!(w, "{line}")
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&*path, e))?;
    }
    Ok(())
}

/// Runs DPSL training over the training split.
///
/// Batch composition, pairs, noise levels and noise draws depend only on
/// the seed and the step index, so a resumed run continues exactly where
/// an uninterrupted one would be.
pub fn train_loop(
    dataset: &crate::storage::Dataset,
    config: &ExperimentConfig,
    outputs: &TrainOutputs,
) -> Result<TrainReport> {
    config.validate()?;
    let cfg = &config.train;
    let denoiser_config = config.denoiser_config();
    if dataset.resolution() != denoiser_config.resolution || dataset.horizons() != denoiser_config.horizons {
        return Err(Error::Data(format!(
            "dataset is {:?} with {} horizons but the config expects {:?} with {}",
            dataset.resolution(),
            dataset.horizons(),
            denoiser_config.resolution,
            denoiser_config.horizons
        )));
    }
    let segments = dataset.segments(Split::Train);
    if segments.is_empty() {
        return Err(Error::Data("training split holds no segments".into()));
    }
    let schedule = config.diffusion.schedule_params().build()?;
    let stepping = config.diffusion.stepping()?;
    let plan = config.plan()?;

    let (mut state, mut optimizer, start_step) = match &outputs.resume_from {
        Some(dir) => {
            let ck = checkpoint::load(dir)?;
            if ck.state.config() != &denoiser_config {
                return Err(Error::Data(format!(
                    "checkpoint {} was trained with a different model configuration",
                    dir.display()
                )));
            }
            let opt = ck
                .optimizer
                .unwrap_or_else(|| AdamW::new(ck.state.num_params()))
                .configured(cfg);
            info!("resuming from {} at step {}", dir.display(), ck.manifest.training_step);
            (ck.state, opt, ck.manifest.training_step)
        }
        None => {
            let state = DenoiserState::new(denoiser_config, config.seed)?;
            let opt = AdamW::new(state.num_params()).configured(cfg);
            (state, opt, 0)
        }
    };

    let n = segments.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let mut total = cfg.epochs as u64 * steps_per_epoch;
    if let Some(cap) = cfg.max_steps {
        total = total.min(cap);
    }
    let val_available = !dataset.segments(Split::Val).is_empty();
    if !val_available {
        warn!("validation split holds no segments; no best checkpoint will be written");
    }

    let append = outputs.resume_from.is_some();
    let mut metrics_log = match &outputs.metrics_log {
        Some(p) => Some((p.clone(), open_log(p, append)?)),
        None => None,
    };
    let mut val_log = match &outputs.validation_log {
        Some(p) => Some((p.clone(), open_log(p, append)?)),
        None => None,
    };

    let manifest_for = |step: u64, val_rmse: Option<f64>| CheckpointManifest {
        format_version: FORMAT_VERSION,
        denoiser_config: config.denoiser_config(),
        schedule_params: config.diffusion.schedule_params(),
        tree: config.tree.clone(),
        d_test: config.diffusion.d_test,
        normalization_constant: dataset.manifest.normalization_constant,
        training_step: step,
        seed: config.seed,
        param_count: 0,
        params_sha256: String::new(),
        optimizer: None,
        val_rmse,
        config_hash: config.hash(),
    };

    let mut report = TrainReport {
        start_step,
        total_steps: total,
        records: Vec::new(),
        validations: Vec::new(),
        best: None,
        checkpoints: Vec::new(),
        state: state.clone(),
    };
    let mut order = (u64::MAX, Vec::new());
    for step in start_step..total {
        let epoch = step / steps_per_epoch;
        if order.0 != epoch {
            order = (epoch, epoch_order(config.seed, epoch, n));
        }
        let pos = ((step % steps_per_epoch) as usize) * cfg.batch_size;
        let batches: Vec<TrainBatch> = (0..cfg.batch_size)
            .map(|b| {
                let seg = &segments[order.1[(pos + b) % n]];
                make_batch(dataset, seg, &plan, cfg, config.diffusion.d_train, config.seed, step, b)
            })
            .collect::<Result<_>>()?;
        let lr = cosine_lr(step, total, cfg.lr_max, cfg.lr_min);
        let loss = dpsl_step(&batches, &mut state, &mut optimizer, &schedule, lr, step)?;
        let record = StepRecord {
            step,
            l1_i: loss.l1_i,
            l1_j: loss.l1_j,
            l2_ij: loss.l2_ij,
            l2_ji: loss.l2_ji,
            total: loss.total,
            lr,
        };
        write_line(&mut metrics_log, &record)?;
        report.records.push(record);

        let done = step + 1;
        let last = done == total;
        let due = |every: u64| (every > 0 && done % every == 0) || last;
        if val_available && due(cfg.eval_every) {
            let eval = evaluate_split(
                &state,
                dataset,
                Split::Val,
                SamplerKind::Tree,
                &plan,
                &stepping,
                &schedule,
                config.diffusion.mode,
                config.seed,
                cfg.val_segments,
            )?;
            let v = validation_record(done, eval.metrics);
            info!("step {done}: loss {:.5} val rmse {:.5}", loss.total, v.rmse);
            write_line(&mut val_log, &v)?;
            report.validations.push(v);
            if report.best.is_none_or(|b| v.rmse < b.rmse) {
                report.best = Some(v);
                if let Some(dir) = &outputs.checkpoint_dir {
                    let path = dir.join("best");
                    checkpoint::save(&path, manifest_for(done, Some(v.rmse)), &state, Some(&optimizer))?;
                }
            }
        }
        if let Some(dir) = &outputs.checkpoint_dir {
            if due(cfg.checkpoint_every) {
                let path = dir.join(format!("step-{done:07}"));
                let val = report.validations.last().filter(|v| v.step == done).map(|v| v.rmse);
                checkpoint::save(&path, manifest_for(done, val), &state, Some(&optimizer))?;
                report.checkpoints.push(path);
            }
        }
    }
    report.state = state;
    Ok(report)
}

fn validation_record(step: u64, m: QualityMetrics) -> ValidationRecord {
    ValidationRecord {
        step,
        rmse: m.rmse,
        mae: m.mae,
        kl: m.kl,
    }
}

#[cfg(test)]
mod tests;
