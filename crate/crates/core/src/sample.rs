//! Reverse diffusion under a tree plan, plus the baseline samplers.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::grid::Grid;
use crate::model::{ConditioningContext, DenoiserState, NoiseQuery};
use crate::rng::{self, StreamRng};
use crate::schedule::{InferenceStepping, NoiseSchedule};
use crate::treeplan::{allocate_segments, TreePlan};

/// Anything that predicts ε for a noisy map.
pub trait Denoiser: Sync {
    fn predict(&self, noisy: &Grid, ctx: &ConditioningContext, q: NoiseQuery) -> Result<Grid>;
}

impl Denoiser for DenoiserState {
    fn predict(&self, noisy: &Grid, ctx: &ConditioningContext, q: NoiseQuery) -> Result<Grid> {
        self.predict_noise(noisy, ctx, q)
    }
}

/// Adapts a closure into a [`Denoiser`].
pub struct FnDenoiser<F>(pub F);

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(&Grid, &ConditioningContext, NoiseQuery) -> Result<Grid> + Sync,
{
    fn predict(&self, noisy: &Grid, ctx: &ConditioningContext, q: NoiseQuery) -> Result<Grid> {
        (self.0)(noisy, ctx, q)
    }
}

struct Counted<'a, D: ?Sized> {
    inner: &'a D,
    calls: AtomicU64,
}

impl<'a, D: Denoiser + ?Sized> Counted<'a, D> {
    fn new(inner: &'a D) -> Self {
        Counted {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    fn predict(&self, noisy: &Grid, ctx: &ConditioningContext, q: NoiseQuery) -> Result<Grid> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict(noisy, ctx, q)
    }

    fn count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransitionMode {
    /// Noise-preserving update; no fresh noise.
    #[default]
    Deterministic,
    /// Adds posterior noise (DDPM for adjacent levels).
    Stochastic,
}

/// One reverse step from `s_from` to `s_to` given the predicted noise.
pub fn reverse_transition(
    noisy: &Grid,
    s_from: usize,
    s_to: usize,
    eps_hat: &Grid,
    schedule: &NoiseSchedule,
    mode: TransitionMode,
    rng: Option<&mut StreamRng>,
) -> Result<Grid> {
    ensure!(
        s_from > s_to,
        "reverse transition must lower the noise level ({s_from} -> {s_to})"
    );
    ensure!(
        s_from <= schedule.steps(),
        "level {s_from} beyond schedule length {}",
        schedule.steps()
    );
    noisy.check_shape(eps_hat)?;
    let ab_from = schedule.alpha_bar(s_from);
    let ab_to = schedule.alpha_bar(s_to);
    let (sf, nf) = (ab_from.sqrt(), (1.0 - ab_from).sqrt());
    let x0 = noisy.zip_with(eps_hat, |x, e| (x - nf * e) / sf)?;
    if s_to == 0 {
        return Ok(x0);
    }
    let sigma2 = match mode {
        TransitionMode::Deterministic => 0.0,
        TransitionMode::Stochastic => {
            (1.0 - ab_to) / (1.0 - ab_from) * (1.0 - ab_from / ab_to)
        }
    };
    let (st, dir) = (ab_to.sqrt(), (1.0 - ab_to - sigma2).max(0.0).sqrt());
    let mut out = x0.zip_with(eps_hat, |x, e| st * x + dir * e)?;
    if sigma2 > 0.0 {
        let rng = rng.ok_or_else(|| {
            Error::InvalidArgument("stochastic transitions need a noise stream".into())
        })?;
        let z = rng::standard_normal_grid(rng, noisy.height(), noisy.width());
        let sigma = sigma2.sqrt();
        for (o, zv) in out.as_mut_slice().iter_mut().zip(z.as_slice()) {
            *o += sigma * zv;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Tree,
    Independent,
    /// One trunk plus a single shifted final step per horizon. This is a
    /// stand-in for output-level temporal transitions, whose exact form is
    /// not pinned down.
    Shared,
    Autoregressive,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 4] = [
        SamplerKind::Tree,
        SamplerKind::Independent,
        SamplerKind::Shared,
        SamplerKind::Autoregressive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Tree => "tree",
            SamplerKind::Independent => "independent",
            SamplerKind::Shared => "shared",
            SamplerKind::Autoregressive => "autoregressive",
        }
    }

    /// Analytic denoiser-call count for `horizons` horizons and
    /// `transitions` reverse steps per full chain.
    pub fn expected_calls(self, plan: &TreePlan, transitions: usize) -> u64 {
        let h = plan.horizons as u64;
        let d = transitions as u64;
        match self {
            SamplerKind::Tree => plan.calls(),
            SamplerKind::Independent | SamplerKind::Autoregressive => h * d,
            SamplerKind::Shared => d - 1 + h,
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SamplerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown sampler {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub mode: TransitionMode,
    /// Run nodes of one tree level (or independent chains) on the rayon pool.
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerRun {
    pub sampler: SamplerKind,
    pub levels: Vec<usize>,
    pub seed: u64,
    pub call_counter: u64,
    /// One map per horizon, clipped to `[0, 1]`.
    pub outputs: Vec<Grid>,
    /// State every horizon branched from (fully shared sampler only).
    pub trunk_state: Option<Grid>,
}

struct Chain<'a, D: Denoiser + ?Sized> {
    denoiser: &'a Counted<'a, D>,
    schedule: &'a NoiseSchedule,
    stepping: &'a InferenceStepping,
    mode: TransitionMode,
}

impl<D: Denoiser + ?Sized> Chain<'_, D> {
    /// Runs transitions `range` starting from `state`. The first transition
    /// carries `first_shift`; the rest use shift 0.
    fn run(
        &self,
        mut state: Grid,
        ctx: &ConditioningContext,
        horizon: usize,
        first_shift: i64,
        range: std::ops::Range<usize>,
        noise: &mut StreamRng,
    ) -> Result<Grid> {
        for (k, i) in range.enumerate() {
            let (from, to) = self.stepping.transition(i);
            let shift = if k == 0 { first_shift } else { 0 };
            let eps = self
                .denoiser
                .predict(&state, ctx, NoiseQuery::new(from, horizon, shift))?;
            state = reverse_transition(&state, from, to, &eps, self.schedule, self.mode, Some(noise))?;
        }
        Ok(state)
    }
}

fn initial_noise(seed: u64, chain: u64, ctx: &ConditioningContext) -> Grid {
    let (h, w) = ctx.cond_map.shape();
    rng::standard_normal_grid(&mut rng::stream(seed, "init-noise", &[chain]), h, w)
}

fn finish(grid: Grid) -> Result<Grid> {
    if !grid.is_finite() {
        return Err(Error::Data("sampler produced non-finite values".into()));
    }
    Ok(grid.map(|v| v.clamp(0.0, 1.0)))
}

fn map_maybe_parallel<T, R>(items: Vec<T>, parallel: bool, f: impl Fn(T) -> Result<R> + Sync + Send) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
{
    if parallel {
        items.into_par_iter().map(f).collect()
    } else {
        items.into_iter().map(f).collect()
    }
}

/// Tree-structured sampling: shared segments, branch replication, and a
/// shifted first transition for every child.
pub fn run_tree<D: Denoiser + ?Sized>(
    plan: &TreePlan,
    stepping: &InferenceStepping,
    schedule: &NoiseSchedule,
    ctx: &ConditioningContext,
    denoiser: &D,
    seed: u64,
    options: SamplerOptions,
) -> Result<SamplerRun> {
    let expected = allocate_segments(stepping.len(), plan.depth)?;
    if plan.segment_steps != expected {
        return Err(Error::InvalidArgument(format!(
            "plan segments {:?} do not partition {} inference steps ({expected:?})",
            plan.segment_steps,
            stepping.len()
        )));
    }
    let counted = Counted::new(denoiser);
    let chain = Chain {
        denoiser: &counted,
        schedule,
        stepping,
        mode: options.mode,
    };

    let mut start = 0;
    let mut states: Vec<Grid> = vec![initial_noise(seed, 0, ctx)];
    for (level, nodes) in plan.levels.iter().enumerate() {
        let steps = plan.segment_steps[level];
        let range = start..start + steps;
        let jobs: Vec<_> = nodes
            .iter()
            .map(|node| {
                let parent_state = &states[node.parent.unwrap_or(0)];
                (node, parent_state.clone())
            })
            .collect();
        states = map_maybe_parallel(jobs, options.parallel, |(node, state)| {
            let mut noise = rng::stream(seed, "step-noise", &[level as u64, node.index as u64]);
            chain.run(
                state,
                ctx,
                node.horizon,
                node.shift() as i64,
                range.clone(),
                &mut noise,
            )
        })?;
        start += steps;
    }

    let mut outputs = vec![None; plan.horizons];
    for (node, state) in plan.leaves().iter().zip(states) {
        outputs[node.horizon] = Some(finish(state)?);
    }
    Ok(SamplerRun {
        sampler: SamplerKind::Tree,
        levels: stepping.levels().to_vec(),
        seed,
        call_counter: counted.count(),
        outputs: outputs.into_iter().map(|o| o.expect("leaves cover all horizons")).collect(),
        trunk_state: None,
    })
}

/// One full reverse trajectory per horizon.
pub fn run_independent<D: Denoiser + ?Sized>(
    horizons: usize,
    stepping: &InferenceStepping,
    schedule: &NoiseSchedule,
    ctx: &ConditioningContext,
    denoiser: &D,
    seed: u64,
    options: SamplerOptions,
) -> Result<SamplerRun> {
    ensure!(horizons >= 1, "need at least one horizon");
    let counted = Counted::new(denoiser);
    let chain = Chain {
        denoiser: &counted,
        schedule,
        stepping,
        mode: options.mode,
    };
    let outputs = map_maybe_parallel((0..horizons).collect(), options.parallel, |t| {
        let mut noise = rng::stream(seed, "chain-noise", &[t as u64]);
        let state = chain.run(initial_noise(seed, t as u64, ctx), ctx, t, 0, 0..stepping.len(), &mut noise)?;
        finish(state)
    })?;
    Ok(SamplerRun {
        sampler: SamplerKind::Independent,
        levels: stepping.levels().to_vec(),
        seed,
        call_counter: counted.count(),
        outputs,
        trunk_state: None,
    })
}

/// A single trunk at horizon 0 down to the last nonzero level, then one
/// shifted step to level 0 per horizon.
pub fn run_fully_shared<D: Denoiser + ?Sized>(
    horizons: usize,
    stepping: &InferenceStepping,
    schedule: &NoiseSchedule,
    ctx: &ConditioningContext,
    denoiser: &D,
    seed: u64,
    options: SamplerOptions,
) -> Result<SamplerRun> {
    ensure!(horizons >= 1, "need at least one horizon");
    let counted = Counted::new(denoiser);
    let chain = Chain {
        denoiser: &counted,
        schedule,
        stepping,
        mode: options.mode,
    };
    let last = stepping.len() - 1;
    let mut noise = rng::stream(seed, "chain-noise", &[0]);
    let trunk = chain.run(initial_noise(seed, 0, ctx), ctx, 0, 0, 0..last, &mut noise)?;
    let outputs = map_maybe_parallel((0..horizons).collect(), options.parallel, |t| {
        let mut noise = rng::stream(seed, "branch-noise", &[t as u64]);
        let state = chain.run(trunk.clone(), ctx, t, t as i64, last..last + 1, &mut noise)?;
        finish(state)
    })?;
    Ok(SamplerRun {
        sampler: SamplerKind::Shared,
        levels: stepping.levels().to_vec(),
        seed,
        call_counter: counted.count(),
        outputs,
        trunk_state: Some(trunk),
    })
}

/// Frame-by-frame generation; each frame is conditioned on the previous
/// generated frame.
pub fn run_autoregressive<D: Denoiser + ?Sized>(
    horizons: usize,
    stepping: &InferenceStepping,
    schedule: &NoiseSchedule,
    ctx: &ConditioningContext,
    denoiser: &D,
    seed: u64,
    options: SamplerOptions,
) -> Result<SamplerRun> {
    ensure!(horizons >= 1, "need at least one horizon");
    let counted = Counted::new(denoiser);
    let chain = Chain {
        denoiser: &counted,
        schedule,
        stepping,
        mode: options.mode,
    };
    let mut outputs: Vec<Grid> = Vec::with_capacity(horizons);
    let mut current = ctx.clone();
    for t in 0..horizons {
        let mut noise = rng::stream(seed, "chain-noise", &[t as u64]);
        let state = chain.run(initial_noise(seed, t as u64, ctx), &current, t, 0, 0..stepping.len(), &mut noise)?;
        let frame = finish(state)?;
        current = ConditioningContext {
            cond_map: frame.clone(),
        };
        outputs.push(frame);
    }
    Ok(SamplerRun {
        sampler: SamplerKind::Autoregressive,
        levels: stepping.levels().to_vec(),
        seed,
        call_counter: counted.count(),
        outputs,
        trunk_state: None,
    })
}

/// Dispatches to the sampler named by `kind`. `plan` must already carry
/// the inference step allocation.
#[allow(clippy::too_many_arguments)]
pub fn run_sampler<D: Denoiser + ?Sized>(
    kind: SamplerKind,
    plan: &TreePlan,
    stepping: &InferenceStepping,
    schedule: &NoiseSchedule,
    ctx: &ConditioningContext,
    denoiser: &D,
    seed: u64,
    options: SamplerOptions,
) -> Result<SamplerRun> {
    let h = plan.horizons;
    match kind {
        SamplerKind::Tree => run_tree(plan, stepping, schedule, ctx, denoiser, seed, options),
        SamplerKind::Independent => run_independent(h, stepping, schedule, ctx, denoiser, seed, options),
        SamplerKind::Shared => run_fully_shared(h, stepping, schedule, ctx, denoiser, seed, options),
        SamplerKind::Autoregressive => {
            run_autoregressive(h, stepping, schedule, ctx, denoiser, seed, options)
        }
    }
}
