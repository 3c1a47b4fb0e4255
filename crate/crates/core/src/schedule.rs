//! Forward diffusion: variance schedule, noising, and inference stepping.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::grid::Grid;

/// Serializable description of a linear variance schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// `betas[k-1]` is β_k for k in 1..=D; `alpha_bars[s]` is ᾱ_s with ᾱ_0 = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    ensure!(steps >= 1, "schedule needs at least one step");
    ensure!(
        0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0,
        "betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
    );
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|k| beta_start + (beta_end - beta_start) * k as f64 / (steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas_with(
        ScheduleParams {
            steps,
            beta_start,
            beta_end,
        },
        betas,
    )
}

impl NoiseSchedule {
    /// Schedule from an explicit β sequence.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        let params = ScheduleParams {
            steps: betas.len(),
            beta_start: betas.first().copied().unwrap_or(0.0),
            beta_end: betas.last().copied().unwrap_or(0.0),
        };
        Self::from_betas_with(params, betas)
    }

    fn from_betas_with(params: ScheduleParams, betas: Vec<f64>) -> Result<Self> {
        ensure!(!betas.is_empty(), "schedule needs at least one step");
        ensure!(
            betas.iter().all(|&b| 0.0 < b && b < 1.0),
            "every beta must lie in (0, 1)"
        );
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule {
            params,
            betas,
            alpha_bars,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// β_k for k in 1..=D.
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha_bar(&self, s: usize) -> f64 {
        self.alpha_bars[s]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// `√ᾱ_s · clean + √(1−ᾱ_s) · eps`; level 0 returns `clean` unchanged.
pub fn forward_noise(clean: &Grid, level: usize, schedule: &NoiseSchedule, eps: &Grid) -> Result<Grid> {
    clean.check_shape(eps)?;
    ensure!(
        level <= schedule.steps(),
        "noise level {level} beyond schedule length {}",
        schedule.steps()
    );
    if level == 0 {
        return Ok(clean.clone());
    }
    let ab = schedule.alpha_bar(level);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    clean.zip_with(eps, |x, e| a * x + b * e)
}

/// Decreasing noise levels visited at inference; the last transition goes
/// from `levels.last()` to 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceStepping {
    levels: Vec<usize>,
}

impl InferenceStepping {
    pub fn new(levels: Vec<usize>, max_level: usize) -> Result<Self> {
        ensure!(!levels.is_empty(), "stepping needs at least one level");
        ensure!(
            levels.windows(2).all(|w| w[0] > w[1]),
            "levels must be strictly decreasing: {levels:?}"
        );
        ensure!(
            *levels.last().unwrap() >= 1 && levels[0] <= max_level,
            "levels must lie in 1..={max_level}: {levels:?}"
        );
        Ok(InferenceStepping { levels })
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    /// Number of reverse transitions (= number of denoiser calls per chain).
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn start_level(&self) -> usize {
        self.levels[0]
    }

    /// `(from, to)` of transition `i`.
    pub fn transition(&self, i: usize) -> (usize, usize) {
        (self.levels[i], self.levels.get(i + 1).copied().unwrap_or(0))
    }

    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.len()).map(|i| self.transition(i))
    }
}

/// Evenly strided levels `round(D_train · (D_test − i + 1) / D_test)`.
pub fn subsample_levels(train_steps: usize, test_steps: usize) -> Result<InferenceStepping> {
    ensure!(
        1 <= test_steps && test_steps <= train_steps,
        "need 1 <= D_test ({test_steps}) <= D_train ({train_steps})"
    );
    let mut levels: Vec<usize> = (1..=test_steps)
        .map(|i| {
            let v = train_steps as f64 * (test_steps - i + 1) as f64 / test_steps as f64;
            (v.round() as usize).clamp(1, train_steps)
        })
        .collect();
    // rounding collisions: push later levels down to keep the count
    for i in 1..levels.len() {
        if levels[i] >= levels[i - 1] {
            levels[i] = levels[i - 1] - 1;
        }
    }
    InferenceStepping::new(levels, train_steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_and_two_factor_products() {
        let s = make_linear_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        let s = make_linear_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_is_monotone_and_vanishes() {
        let s = ScheduleParams::default().build().unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        // oracle: product evaluated in log space
        let log_sum: f64 = (0..1000)
            .map(|k| (1.0 - (1e-4 + (0.02 - 1e-4) * k as f64 / 999.0)).ln())
            .sum();
        assert!((s.alpha_bar(1000) - log_sum.exp()).abs() < 1e-12);
        assert!(s.alpha_bar(1000) < 1e-4);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!((s.beta(1) - 1e-4).abs() < 1e-18 && (s.beta(1000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn bad_betas_rejected() {
        assert!(make_linear_schedule(0, 0.1, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.3, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_noise_cases() {
        let s = NoiseSchedule::from_betas(vec![0.25]).unwrap();
        let clean = Grid::from_vec(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let ones = Grid::filled(2, 2, 1.0);
        assert_eq!(forward_noise(&clean, 0, &s, &ones).unwrap(), clean);

        let det = forward_noise(&clean, 1, &s, &Grid::zeros(2, 2)).unwrap();
        for (a, b) in det.as_slice().iter().zip(clean.as_slice()) {
            assert_eq!(*a, 0.75f64.sqrt() * b);
        }
        let pure = forward_noise(&Grid::zeros(2, 2), 1, &s, &ones).unwrap();
        assert!(pure.as_slice().iter().all(|&v| (v - 0.5).abs() < 1e-15));

        assert!(forward_noise(&clean, 1, &s, &Grid::zeros(3, 2)).is_err());
        assert!(forward_noise(&clean, 2, &s, &ones).is_err());
    }

    #[test]
    fn forward_noise_superposition() {
        let s = ScheduleParams::default().build().unwrap();
        let a = Grid::from_vec(1, 3, vec![0.2, -0.1, 0.7]).unwrap();
        let b = Grid::from_vec(1, 3, vec![1.0, 0.5, -2.0]).unwrap();
        let zero = Grid::zeros(1, 3);
        let level = 321;
        let from_clean = forward_noise(&a, level, &s, &zero).unwrap();
        let from_eps = forward_noise(&zero, level, &s, &b).unwrap();
        let both = forward_noise(&a, level, &s, &b).unwrap();
        for i in 0..3 {
            let sum = from_clean.as_slice()[i] + from_eps.as_slice()[i];
            assert!((sum - both.as_slice()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn ten_step_subsampling() {
        let st = subsample_levels(1000, 10).unwrap();
        assert_eq!(st.levels(), &[1000, 900, 800, 700, 600, 500, 400, 300, 200, 100]);
        assert_eq!(st.transition(9), (100, 0));
        assert_eq!(st.transitions().count(), 10);
    }

    #[test]
    fn identity_and_single_step() {
        let st = subsample_levels(7, 7).unwrap();
        assert_eq!(st.levels(), &[7, 6, 5, 4, 3, 2, 1]);
        let st = subsample_levels(200, 1).unwrap();
        assert_eq!(st.levels(), &[200]);
        assert_eq!(st.transition(0), (200, 0));
        assert!(subsample_levels(5, 6).is_err());
        assert!(subsample_levels(5, 0).is_err());
    }

    #[test]
    fn subsampling_is_unique_for_all_small_cases() {
        for train in 1..60 {
            for test in 1..=train {
                let st = subsample_levels(train, test).unwrap();
                assert_eq!(st.len(), test);
                assert_eq!(st.start_level(), train);
            }
        }
    }
}
