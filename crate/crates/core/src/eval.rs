//! Forecast quality metrics, analytic cost accounting, the step-scaling
//! benchmark and the synthetic moving-bump dataset.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TreeConfig;
use crate::error::{ensure, Error, Result};
use crate::frm::{normalize_dataset, rasterize_kernel, FireRiskMap, KernelSpec};
use crate::grid::Grid;
use crate::ingest::{build_block_segment_index, BoundingBox, SegmentIndex, Split, SplitRatios};
use crate::model::{ConditioningContext, DenoiserConfig, DenoiserState};
use crate::rng;
use crate::sample::{run_sampler, Denoiser, SamplerKind, SamplerOptions, TransitionMode};
use crate::schedule::{subsample_levels, InferenceStepping, NoiseSchedule};
use crate::storage::{frame_stem, write_dataset, Dataset, DatasetManifest, DayEntry};
use crate::treeplan::TreePlan;

/// Additive smoothing applied before normalizing maps into distributions.
pub const KL_EPSILON: f64 = 1e-8;
/// Direction of the reported divergence.
pub const KL_DIRECTION: &str = "KL(target || pred)";

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QualityMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub kl: f64,
}

impl QualityMetrics {
    /// Arithmetic mean of several metric sets.
    pub fn mean(items: &[QualityMetrics]) -> QualityMetrics {
        if items.is_empty() {
            return QualityMetrics::default();
        }
        let n = items.len() as f64;
        QualityMetrics {
            rmse: items.iter().map(|m| m.rmse).sum::<f64>() / n,
            mae: items.iter().map(|m| m.mae).sum::<f64>() / n,
            kl: items.iter().map(|m| m.kl).sum::<f64>() / n,
        }
    }
}

fn smoothed_distribution(map: &Grid) -> Vec<f64> {
    let total: f64 = map.as_slice().iter().map(|v| v + KL_EPSILON).sum();
    map.as_slice().iter().map(|v| (v + KL_EPSILON) / total).collect()
}

/// `KL(target || pred)` between the smoothed, renormalized maps.
pub fn kl_divergence(target: &Grid, pred: &Grid) -> Result<f64> {
    target.check_shape(pred)?;
    let p = smoothed_distribution(target);
    let q = smoothed_distribution(pred);
    Ok(p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum::<f64>().max(0.0))
}

/// Metrics of one prediction per horizon, averaged over horizons.
pub fn quality(pred: &[Grid], target: &[Grid]) -> Result<QualityMetrics> {
    ensure!(
        pred.len() == target.len() && !pred.is_empty(),
        "need matching non-empty horizon lists, got {} and {}",
        pred.len(),
        target.len()
    );
    let mut per_horizon = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        t.check_shape(p)?;
        if !p.is_finite() || !t.is_finite() {
            return Err(Error::Data("metric inputs contain non-finite values".into()));
        }
        let n = p.len() as f64;
        let (mut se, mut ae) = (0.0, 0.0);
        for (a, b) in p.as_slice().iter().zip(t.as_slice()) {
            se += (a - b) * (a - b);
            ae += (a - b).abs();
        }
        per_horizon.push(QualityMetrics {
            rmse: (se / n).sqrt(),
            mae: ae / n,
            kl: kl_divergence(t, p)?,
        });
    }
    Ok(QualityMetrics::mean(&per_horizon))
}

/// Floating-point operations of one denoiser call (2 per multiply-accumulate).
pub fn flops_per_call(layer_macs: &[(String, u64)]) -> u64 {
    2 * layer_macs.iter().map(|(_, m)| m).sum::<u64>()
}

/// Analytic GFLOPs of `calls` denoiser calls.
pub fn flops_estimate(config: &DenoiserConfig, calls: u64) -> Result<f64> {
    let state = DenoiserState::new(config.clone(), 0)?;
    Ok((flops_per_call(&state.layer_macs()) * calls) as f64 / 1e9)
}

/// Results of evaluating one sampler over (part of) a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEvaluation {
    pub split: Split,
    pub sampler: SamplerKind,
    pub segments: Vec<usize>,
    pub metrics: QualityMetrics,
    pub per_segment: Vec<QualityMetrics>,
    pub calls_per_segment: u64,
}

/// Sampling seed for the segment starting at `start_day`.
pub fn segment_seed(seed: u64, start_day: usize) -> u64 {
    rng::stream(seed, "sample", &[start_day as u64]).next_u64()
}

/// Evenly spaced subset of `n` items (`max == 0` or `max >= n`: all).
pub fn spread_indices(n: usize, max: usize) -> Vec<usize> {
    if max == 0 || max >= n {
        return (0..n).collect();
    }
    (0..max).map(|i| i * n / max).collect()
}

/// Samples every selected segment of `split` and scores it against the
/// ground-truth frames.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_split<D: Denoiser + ?Sized>(
    denoiser: &D,
    dataset: &Dataset,
    split: Split,
    sampler: SamplerKind,
    plan: &TreePlan,
    stepping: &InferenceStepping,
    schedule: &NoiseSchedule,
    mode: TransitionMode,
    seed: u64,
    max_segments: usize,
) -> Result<SplitEvaluation> {
    let segments = dataset.segments(split);
    if segments.is_empty() {
        return Err(Error::Data(format!("{} split holds no segments", split.name())));
    }
    let picks = spread_indices(segments.len(), max_segments);
    let options = SamplerOptions {
        mode,
        parallel: false,
    };
    let results: Vec<(QualityMetrics, u64)> = picks
        .par_iter()
        .map(|&i| {
            let seg = &segments[i];
            let ctx = ConditioningContext::new(dataset.condition(seg).clone())?;
            let run = run_sampler(
                sampler,
                plan,
                stepping,
                schedule,
                &ctx,
                denoiser,
                segment_seed(seed, seg.start_day),
                options,
            )?;
            Ok((quality(&run.outputs, &dataset.targets(seg))?, run.call_counter))
        })
        .collect::<Result<_>>()?;
    let per_segment: Vec<QualityMetrics> = results.iter().map(|r| r.0).collect();
    Ok(SplitEvaluation {
        split,
        sampler,
        segments: picks,
        metrics: QualityMetrics::mean(&per_segment),
        per_segment,
        calls_per_segment: results[0].1,
    })
}

/// Wall time and analytic cost of one sampler at one step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub sampler: SamplerKind,
    pub d_test: usize,
    pub calls: u64,
    pub expected_calls: u64,
    pub repeats: usize,
    pub wall_time_ms_mean: f64,
    pub wall_time_ms_std: f64,
    /// Robust central value used for the ordering check and the fits.
    pub wall_time_ms_median: f64,
    pub flops_g: f64,
    pub params_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub d_test: usize,
    pub tree_ms: f64,
    pub independent_ms: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub sampler: SamplerKind,
    pub slope_ms_per_step: f64,
    pub intercept_ms: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub rows: Vec<EfficiencyReport>,
    /// Tree versus independent at each step count (when both were run).
    pub ordering: Vec<OrderingCheck>,
    pub fits: Vec<LinearFit>,
}

impl BenchTable {
    pub fn ordering_holds(&self) -> bool {
        self.ordering.iter().all(|o| o.holds)
    }

    pub fn min_r_squared(&self) -> f64 {
        self.fits.iter().map(|f| f.r_squared).fold(f64::INFINITY, f64::min)
    }

    /// Aligned text rendering.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<15} {:>6} {:>7} {:>9} {:>12} {:>10} {:>10} {:>9}\n",
            "sampler", "D_test", "calls", "expected", "median_ms", "std_ms", "GFLOPs", "params_M"
        );
        for r in &self.rows {
            out += &format!(
                "{:<15} {:>6} {:>7} {:>9} {:>12.3} {:>10.3} {:>10.4} {:>9.4}\n",
                r.sampler.name(),
                r.d_test,
                r.calls,
                r.expected_calls,
                r.wall_time_ms_median,
                r.wall_time_ms_std,
                r.flops_g,
                r.params_m
            );
        }
        for o in &self.ordering {
            out += &format!(
                "ordering D_test={:<4} tree {:.3} ms < independent {:.3} ms: {}\n",
                o.d_test,
                o.tree_ms,
                o.independent_ms,
                if o.holds { "yes" } else { "NO" }
            );
        }
        for f in &self.fits {
            out += &format!(
                "linear fit {:<15} slope {:.4} ms/step, R^2 = {:.5}\n",
                f.sampler.name(),
                f.slope_ms_per_step,
                f.r_squared
            );
        }
        out
    }
}

/// Least-squares line through `points`; returns `(slope, intercept, R²)`.
pub fn linear_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, intercept, r2)
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

fn median(samples: &[f64]) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

pub const BENCH_WARMUPS: usize = 2;

/// Times every sampler at every step count on one conditioning map,
/// single-threaded, after [`BENCH_WARMUPS`] untimed runs per cell; the
/// ordering check and the linear fits use per-cell median wall times.
#[allow(clippy::too_many_arguments)]
pub fn bench_scaling(
    state: &DenoiserState,
    ctx: &ConditioningContext,
    schedule: &NoiseSchedule,
    tree: &TreeConfig,
    samplers: &[SamplerKind],
    d_test_list: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<BenchTable> {
    ensure!(repeats >= 3, "bench needs at least 3 repeats, got {repeats}");
    ensure!(!samplers.is_empty() && !d_test_list.is_empty(), "nothing to benchmark");
    let horizons = state.config().horizons;
    let flops_call = flops_per_call(&state.layer_macs());
    let params_m = state.num_params() as f64 / 1e6;
    let options = SamplerOptions {
        mode: TransitionMode::Deterministic,
        parallel: false,
    };
    struct Cell {
        kind: SamplerKind,
        d_test: usize,
        plan: TreePlan,
        stepping: InferenceStepping,
        calls: u64,
        times: Vec<f64>,
    }
    let mut cells = Vec::new();
    for &d_test in d_test_list {
        let stepping = subsample_levels(schedule.steps(), d_test)?;
        let plan = tree.plan(horizons, d_test)?;
        for &kind in samplers {
            cells.push(Cell {
                kind,
                d_test,
                plan: plan.clone(),
                stepping: stepping.clone(),
                calls: 0,
                times: Vec::with_capacity(repeats),
            });
        }
    }
    let run = |c: &Cell| run_sampler(c.kind, &c.plan, &c.stepping, schedule, ctx, state, seed, options);
    for cell in &mut cells {
        for _ in 0..BENCH_WARMUPS {
            cell.calls = run(cell)?.call_counter;
        }
    }
    // Repeats go round-robin over all cells so slow drift in machine load
    // is spread evenly instead of biasing whichever cells ran last.
    for _ in 0..repeats {
        for cell in &mut cells {
            let start = Instant::now();
            let out = run(cell)?;
            cell.times.push(start.elapsed().as_secs_f64() * 1e3);
            cell.calls = out.call_counter;
        }
    }
    let rows: Vec<EfficiencyReport> = cells
        .iter()
        .map(|c| {
            let (mean, std) = mean_std(&c.times);
            EfficiencyReport {
                sampler: c.kind,
                d_test: c.d_test,
                calls: c.calls,
                expected_calls: c.kind.expected_calls(&c.plan, c.stepping.len()),
                repeats,
                wall_time_ms_mean: mean,
                wall_time_ms_std: std,
                wall_time_ms_median: median(&c.times),
                flops_g: (flops_call * c.calls) as f64 / 1e9,
                params_m,
            }
        })
        .collect();
    let time_of = |kind: SamplerKind, d: usize| {
        rows.iter()
            .find(|r| r.sampler == kind && r.d_test == d)
            .map(|r| r.wall_time_ms_median)
    };
    let ordering = d_test_list
        .iter()
        .filter_map(|&d| {
            let tree_ms = time_of(SamplerKind::Tree, d)?;
            let independent_ms = time_of(SamplerKind::Independent, d)?;
            Some(OrderingCheck {
                d_test: d,
                tree_ms,
                independent_ms,
                holds: tree_ms < independent_ms,
            })
        })
        .collect();
    let fits = samplers
        .iter()
        .filter(|_| d_test_list.len() >= 2)
        .map(|&kind| {
            let points: Vec<(f64, f64)> = d_test_list
                .iter()
                .map(|&d| (d as f64, time_of(kind, d).expect("row exists")))
                .collect();
            let (slope, intercept, r2) = linear_fit(&points);
            LinearFit {
                sampler: kind,
                slope_ms_per_step: slope,
                intercept_ms: intercept,
                r_squared: r2,
            }
        })
        .collect();
    Ok(BenchTable {
        rows,
        ordering,
        fits,
    })
}

/// Parameters of the moving-bump generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_segments: usize,
    pub horizons: usize,
    pub resolution: (usize, usize),
    pub sigma_px: f64,
    pub max_speed_px: f64,
    pub ratios: SplitRatios,
    pub bbox: BoundingBox,
    pub seed: u64,
}

/// Generated maps (normalized), their manifest and the block segment index.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub maps: Vec<FireRiskMap>,
    pub index: SegmentIndex,
}

/// Draws the start position and velocity of one segment so the bump stays
/// at least 4σ inside the grid for all of its frames.
fn bump_track(spec: &SyntheticSpec, segment: usize) -> ((f64, f64), (f64, f64)) {
    let mut rng = rng::stream(spec.seed, "data", &[segment as u64]);
    let (h, w) = spec.resolution;
    let margin = 4.0 * spec.sigma_px;
    let span = spec.horizons as f64;
    let mut axis = |extent: usize| {
        let (lo, hi) = (margin, extent as f64 - 1.0 - margin);
        let max_v = spec.max_speed_px.min((hi - lo) / span);
        let v = if max_v > 0.0 {
            rng.random_range(-max_v..=max_v)
        } else {
            0.0
        };
        // Start so that start + t·v stays in [lo, hi] for t ∈ [0, span].
        let (s_lo, s_hi) = if v >= 0.0 { (lo, hi - v * span) } else { (lo - v * span, hi) };
        let start = if s_hi > s_lo {
            rng.random_range(s_lo..=s_hi)
        } else {
            s_lo
        };
        (start, v)
    };
    let (x0, vx) = axis(w);
    let (y0, vy) = axis(h);
    ((x0, y0), (vx, vy))
}

/// Moving Gaussian bumps, one independent sequence per segment, rasterized
/// like event kernels and normalized with the training-split constant.
pub fn make_synthetic_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    let (h, w) = spec.resolution;
    ensure!(h >= 16 && w >= 16, "synthetic maps need at least 16x16 pixels");
    ensure!(spec.horizons >= 1, "need at least one horizon");
    ensure!(spec.sigma_px > 0.0, "bump width must be positive");
    ensure!(spec.max_speed_px >= 0.0, "speed bound must be non-negative");
    ensure!(
        8.0 * spec.sigma_px < h.min(w) as f64 - 1.0,
        "a {}-pixel bump does not fit in {h}x{w}",
        spec.sigma_px
    );
    let length = spec.horizons + 1;
    let index = build_block_segment_index(spec.num_segments, spec.ratios, length)?;
    let mut raw = Vec::with_capacity(spec.num_segments * length);
    for seg in 0..spec.num_segments {
        let ((x0, y0), (vx, vy)) = bump_track(spec, seg);
        for t in 0..length {
            let center = (x0 + t as f64 * vx, y0 + t as f64 * vy);
            let kernel = KernelSpec::new(center, (spec.sigma_px, spec.sigma_px))?;
            raw.push(FireRiskMap {
                grid: rasterize_kernel(&kernel, spec.resolution, None)?,
                day_index: seg * length + t,
                normalization_constant: 1.0,
            });
        }
    }
    let train_days = index.day_range(Split::Train);
    let (maps, constant) = normalize_dataset(&raw, |d| train_days.contains(&d))?;
    let manifest = DatasetManifest {
        source: "synthetic".into(),
        num_days: maps.len(),
        resolution: [h, w],
        bbox: spec.bbox,
        normalization_constant: constant,
        horizons: spec.horizons,
        days: (0..maps.len())
            .map(|d| DayEntry {
                day_index: d,
                file: format!("frames/{}.f32", frame_stem(d)),
                date: None,
            })
            .collect(),
    };
    Ok(SyntheticDataset {
        manifest,
        maps,
        index,
    })
}

/// Generates and writes a synthetic dataset directory.
pub fn write_synthetic_dataset(dir: &Path, spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    let data = make_synthetic_dataset(spec)?;
    write_dataset(dir, &data.manifest, &data.maps, &data.index)?;
    Ok(data)
}
