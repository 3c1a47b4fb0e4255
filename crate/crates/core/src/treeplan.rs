//! Tree-structured reverse-trajectory plans and their exact cost analysis.
//!
//! A plan of depth `L` splits the reverse process into `L` segments. All
//! horizons share the root segment; after segment `ℓ` every node branches
//! into `n_ℓ` children, each owning a contiguous, equal share of its
//! parent's horizon block. Leaves are single horizons.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub level: usize,
    /// Position within its level, left to right.
    pub index: usize,
    pub horizon: usize,
    pub parent_horizon: usize,
    /// Index of the parent in the previous level; `None` for the root.
    pub parent: Option<usize>,
    /// Inclusive range of leaf horizons below this node.
    pub block: (usize, usize),
}

impl TreeNode {
    /// Relative horizon offset applied on the node's first transition.
    pub fn shift(&self) -> usize {
        self.horizon - self.parent_horizon
    }

    pub fn block_len(&self) -> usize {
        self.block.1 - self.block.0 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreePlan {
    pub horizons: usize,
    pub depth: usize,
    pub branching: Vec<usize>,
    pub segment_steps: Vec<usize>,
    pub levels: Vec<Vec<TreeNode>>,
}

fn integer_root(value: usize, degree: u32) -> Option<usize> {
    let guess = (value as f64).powf(1.0 / degree as f64).round() as usize;
    (guess.saturating_sub(1)..=guess + 1)
        .find(|&n| n >= 1 && (n as u128).checked_pow(degree) == Some(value as u128))
}

fn prime_factors(mut n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = 2;
    while p * p <= n {
        while n.is_multiple_of(p) {
            out.push(p);
            n /= p;
        }
        p += 1;
    }
    if n > 1 {
        out.push(n);
    }
    out
}

/// Per-level branching factors whose product is `horizons`.
///
/// An integer `(L−1)`-th root gives the uniform vector. Otherwise the prime
/// factors are packed into `L−1` slots (largest first, each onto the
/// currently smallest slot), sorted descending and padded with 1s.
pub fn solve_branching(horizons: usize, depth: usize) -> Result<Vec<usize>> {
    ensure!(horizons >= 1, "need at least one horizon");
    ensure!(
        depth >= 2,
        "tree depth must be >= 2 (got {depth}); use the fully shared sampler for a single trajectory"
    );
    let slots = depth - 1;
    if let Some(n) = integer_root(horizons, slots as u32) {
        return Ok(vec![n; slots]);
    }
    let mut primes = prime_factors(horizons);
    primes.sort_unstable_by(|a, b| b.cmp(a));
    let mut factors = vec![1usize; slots];
    for p in primes {
        let smallest = (0..slots).min_by_key(|&i| factors[i]).expect("slots >= 1");
        factors[smallest] *= p;
    }
    factors.sort_unstable_by(|a, b| b.cmp(a));
    Ok(factors)
}

/// Splits `steps` into `depth` segments; the remainder goes to the earliest
/// (most shared) segments.
pub fn allocate_segments(steps: usize, depth: usize) -> Result<Vec<usize>> {
    ensure!(depth >= 1, "depth must be positive");
    ensure!(
        steps >= depth,
        "{steps} reverse steps cannot fill {depth} segments"
    );
    let base = steps / depth;
    let extra = steps % depth;
    Ok((0..depth).map(|i| base + usize::from(i < extra)).collect())
}

/// Full plan from an explicit branching vector.
pub fn build_plan_with_branching(
    horizons: usize,
    branching: Vec<usize>,
    steps: usize,
) -> Result<TreePlan> {
    ensure!(horizons >= 1, "need at least one horizon");
    ensure!(
        branching.iter().all(|&n| n >= 1),
        "branching factors must be positive: {branching:?}"
    );
    let product: usize = branching.iter().product();
    ensure!(
        product == horizons,
        "branching {branching:?} yields {product} leaves, expected {horizons}"
    );
    let depth = branching.len() + 1;
    let segment_steps = allocate_segments(steps, depth)?;

    let mut levels = vec![vec![TreeNode {
        level: 0,
        index: 0,
        horizon: 0,
        parent_horizon: 0,
        parent: None,
        block: (0, horizons - 1),
    }]];
    for (l, &n) in branching.iter().enumerate() {
        let parents = &levels[l];
        let mut children = Vec::with_capacity(parents.len() * n);
        for (pi, parent) in parents.iter().enumerate() {
            let size = parent.block_len() / n;
            for j in 0..n {
                let lo = parent.block.0 + j * size;
                children.push(TreeNode {
                    level: l + 1,
                    index: children.len(),
                    horizon: lo,
                    parent_horizon: parent.horizon,
                    parent: Some(pi),
                    block: (lo, lo + size - 1),
                });
            }
        }
        levels.push(children);
    }
    Ok(TreePlan {
        horizons,
        depth,
        branching,
        segment_steps,
        levels,
    })
}

pub fn build_plan(horizons: usize, depth: usize, steps: usize) -> Result<TreePlan> {
    let branching = solve_branching(horizons, depth)?;
    build_plan_with_branching(horizons, branching, steps)
}

impl TreePlan {
    pub fn leaves(&self) -> &[TreeNode] {
        self.levels.last().expect("plan has a root level")
    }

    pub fn nodes_per_level(&self) -> Vec<usize> {
        self.levels.iter().map(Vec::len).collect()
    }

    /// The common branching factor when every level branches equally.
    pub fn uniform_branching(&self) -> Option<usize> {
        let first = *self.branching.first()?;
        self.branching.iter().all(|&n| n == first).then_some(first)
    }

    /// Distinct nonzero horizon offsets realized at branch points.
    pub fn realized_shifts(&self) -> Vec<usize> {
        let mut shifts: Vec<usize> = self
            .levels
            .iter()
            .flatten()
            .map(TreeNode::shift)
            .filter(|&s| s > 0)
            .collect();
        shifts.sort_unstable();
        shifts.dedup();
        shifts
    }

    /// All `(parent_horizon, child_horizon)` pairs, one per branch transition.
    pub fn branch_transitions(&self) -> Vec<(usize, usize)> {
        self.levels[1..]
            .iter()
            .flatten()
            .map(|n| (n.parent_horizon, n.horizon))
            .collect()
    }

    /// Denoiser calls: Σ_ℓ nodes_ℓ · d_ℓ.
    pub fn calls(&self) -> u64 {
        self.levels
            .iter()
            .zip(&self.segment_steps)
            .map(|(nodes, &d)| nodes.len() as u64 * d as u64)
            .sum()
    }

    pub fn total_steps(&self) -> usize {
        self.segment_steps.iter().sum()
    }

    /// Same topology with the reverse steps reallocated (e.g. to the
    /// inference stepping).
    pub fn with_steps(&self, steps: usize) -> Result<TreePlan> {
        build_plan_with_branching(self.horizons, self.branching.clone(), steps)
    }
}

/// Denoiser-call and reduction-factor report for one plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub horizons: usize,
    pub depth: usize,
    pub steps: usize,
    pub branching: Vec<usize>,
    pub segment_steps: Vec<usize>,
    pub calls_nt: u64,
    /// One full trajectory per horizon: `(T+1)·D`.
    pub calls_traditional: u64,
    /// Shared trunk of `D−1` steps plus one shifted final step per horizon.
    pub calls_shared: u64,
    /// Geometric-series count `(N^L−1)/(N−1) · D/L`; uniform plans with `L | D`.
    pub calls_closed_form: Option<u64>,
    pub reduction_exact: f64,
    /// `L(N−1)(T+1) / (N(T+1)−1)`; uniform plans with N > 1.
    pub reduction_closed_form: Option<f64>,
    /// Same value written through `N = (T+1)^{1/(L−1)}` only.
    pub reduction_explicit: Option<f64>,
    /// Large-horizon approximation `L(1 − 1/N)`.
    pub reduction_approx: Option<f64>,
}

pub fn closed_form_reduction(depth: usize, branching: usize, horizons: usize) -> Option<f64> {
    if branching < 2 {
        return None;
    }
    let (l, n, h) = (depth as f64, branching as f64, horizons as f64);
    Some(l * (n - 1.0) * h / (n * h - 1.0))
}

pub fn explicit_reduction(depth: usize, horizons: usize) -> Option<f64> {
    if depth < 2 || horizons < 2 {
        return None;
    }
    let (l, h) = (depth as f64, horizons as f64);
    let root = h.powf(1.0 / (l - 1.0));
    Some(l * h * (root - 1.0) / (h.powf(l / (l - 1.0)) - 1.0))
}

pub fn approx_reduction(depth: usize, branching: usize) -> Option<f64> {
    (branching >= 2).then(|| depth as f64 * (1.0 - 1.0 / branching as f64))
}

pub fn count_calls(plan: &TreePlan) -> CostReport {
    let steps = plan.total_steps();
    let calls_nt = plan.calls();
    let calls_traditional = (plan.horizons * steps) as u64;
    let calls_shared = (steps - 1 + plan.horizons) as u64;
    let uniform = plan.uniform_branching().filter(|&n| n >= 2);
    let calls_closed_form = uniform.and_then(|n| {
        if !steps.is_multiple_of(plan.depth) {
            return None;
        }
        let geometric = (n.pow(plan.depth as u32) - 1) / (n - 1);
        Some((geometric * (steps / plan.depth)) as u64)
    });
    CostReport {
        horizons: plan.horizons,
        depth: plan.depth,
        steps,
        branching: plan.branching.clone(),
        segment_steps: plan.segment_steps.clone(),
        calls_nt,
        calls_traditional,
        calls_shared,
        calls_closed_form,
        reduction_exact: calls_traditional as f64 / calls_nt as f64,
        reduction_closed_form: uniform
            .and_then(|n| closed_form_reduction(plan.depth, n, plan.horizons)),
        reduction_explicit: uniform.and_then(|_| explicit_reduction(plan.depth, plan.horizons)),
        reduction_approx: uniform.and_then(|n| approx_reduction(plan.depth, n)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionRow {
    pub depth: usize,
    pub branching: Option<Vec<usize>>,
    pub uniform: bool,
    pub calls_nt: Option<u64>,
    pub r_exact: Option<f64>,
    pub r_closed: Option<f64>,
    pub r_explicit: Option<f64>,
    pub r_approx: Option<f64>,
    /// Why the row could not be built, if it could not.
    pub flag: Option<String>,
}

/// Reduction factors over a range of depths; invalid depths are flagged.
pub fn reduction_curve(
    horizons: usize,
    steps: usize,
    depths: impl IntoIterator<Item = usize>,
) -> Vec<ReductionRow> {
    depths
        .into_iter()
        .map(|depth| match build_plan(horizons, depth, steps) {
            Ok(plan) => {
                let report = count_calls(&plan);
                ReductionRow {
                    depth,
                    uniform: plan.uniform_branching().is_some(),
                    branching: Some(plan.branching),
                    calls_nt: Some(report.calls_nt),
                    r_exact: Some(report.reduction_exact),
                    r_closed: report.reduction_closed_form,
                    r_explicit: report.reduction_explicit,
                    r_approx: report.reduction_approx,
                    flag: None,
                }
            }
            Err(e) => ReductionRow {
                depth,
                branching: None,
                uniform: false,
                calls_nt: None,
                r_exact: None,
                r_closed: None,
                r_explicit: None,
                r_approx: None,
                flag: Some(match e {
                    Error::InvalidArgument(msg) => msg,
                    other => other.to_string(),
                }),
            },
        })
        .collect()
}

/// Depths `L >= 2` whose branching is uniform (integer `(L−1)`-th root).
pub fn uniform_depths(horizons: usize) -> Vec<usize> {
    if horizons < 2 {
        return Vec::new();
    }
    (2..=horizons.ilog2() as usize + 1)
        .filter(|&l| integer_root(horizons, (l - 1) as u32).is_some())
        .collect()
}
