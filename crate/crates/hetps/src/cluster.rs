//! Model parameters, truncated tail-sequence states, the weighted sup metric,
//! and the capacity-ratio index maps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default truncation depth for tail sequences. Equilibrium tails decay
/// doubly exponentially, so 64 levels is far more than any stable load needs.
pub const DEFAULT_DEPTH: usize = 64;

/// Mass below this threshold at any index is treated as zero.
pub const TAIL_EPS: f64 = 1e-14;

/// Solvers must see `u_K` below this bound before declaring convergence;
/// anything larger signals an inadequate truncation depth.
pub const CONVERGENCE_TAIL_BOUND: f64 = 1e-9;

/// The two sampling-based dispatch schemes that have a mean-field limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    /// Dispatch to the minimum-occupancy server among the sampled set;
    /// cross-type ties go to the largest capacity.
    One,
    /// Per-type minimum-occupancy preselection, then dispatch to the sampled
    /// server maximizing capacity per unfinished job.
    Two,
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("M must be at least 1")]
    NoTypes,
    #[error("gamma, C, d must all have length M={0}")]
    LengthMismatch(usize),
    #[error("gamma must sum to 1 (got {0})")]
    GammaSum(f64),
    #[error("gamma[{0}] must be positive")]
    GammaNonPositive(usize),
    #[error("capacities must be positive and sorted nondecreasing (violated at index {0})")]
    CapacityOrder(usize),
    #[error("d[{0}] must be at least 1")]
    SampleCount(usize),
    #[error("lambda must be positive")]
    Lambda,
    #[error("mu must be positive")]
    Mu,
}

/// Static parameters of the heterogeneous cluster: `M` server types, type
/// fractions `gamma`, capacities `C` sorted nondecreasing, per-type sample
/// counts `d`, normalized arrival rate `lambda` and inverse mean job size `mu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    gamma: Vec<f64>,
    capacity: Vec<f64>,
    samples: Vec<usize>,
    lambda: f64,
    mu: f64,
}

impl ClusterSpec {
    pub fn new(
        gamma: Vec<f64>,
        capacity: Vec<f64>,
        samples: Vec<usize>,
        lambda: f64,
        mu: f64,
    ) -> Result<Self, SpecError> {
        let m = gamma.len();
        if m == 0 {
            return Err(SpecError::NoTypes);
        }
        if capacity.len() != m || samples.len() != m {
            return Err(SpecError::LengthMismatch(m));
        }
        let sum: f64 = gamma.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(SpecError::GammaSum(sum));
        }
        if let Some(j) = gamma.iter().position(|&g| g <= 0.0) {
            return Err(SpecError::GammaNonPositive(j));
        }
        for j in 0..m {
            if capacity[j] <= 0.0 || (j > 0 && capacity[j] < capacity[j - 1]) {
                return Err(SpecError::CapacityOrder(j));
            }
        }
        if let Some(j) = samples.iter().position(|&d| d < 1) {
            return Err(SpecError::SampleCount(j));
        }
        if !(lambda > 0.0) {
            return Err(SpecError::Lambda);
        }
        if !(mu > 0.0) {
            return Err(SpecError::Mu);
        }
        Ok(Self {
            gamma,
            capacity,
            samples,
            lambda,
            mu,
        })
    }

    /// Single-type spec, mostly for oracles and tests.
    pub fn single(capacity: f64, d: usize, lambda: f64, mu: f64) -> Result<Self, SpecError> {
        Self::new(vec![1.0], vec![capacity], vec![d], lambda, mu)
    }

    /// Same parameters with a different arrival rate.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self, SpecError> {
        Self::new(
            self.gamma.clone(),
            self.capacity.clone(),
            self.samples.clone(),
            lambda,
            self.mu,
        )
    }

    pub fn num_types(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn capacity(&self) -> &[f64] {
        &self.capacity
    }

    pub fn samples(&self) -> &[usize] {
        &self.samples
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// Per-type load parameter `Delta_j = lambda / (mu gamma_j C_j)`.
    pub fn delta(&self, j: usize) -> f64 {
        self.lambda / (self.mu * self.gamma[j] * self.capacity[j])
    }

    /// Aggregate capacity `sum_j gamma_j C_j`.
    pub fn total_capacity(&self) -> f64 {
        self.gamma
            .iter()
            .zip(&self.capacity)
            .map(|(g, c)| g * c)
            .sum()
    }

    /// System load `rho = lambda / (mu sum_j gamma_j C_j)`.
    pub fn rho(&self) -> f64 {
        self.lambda / (self.mu * self.total_capacity())
    }

    /// Strict maximal stability condition `lambda < mu sum_j gamma_j C_j`.
    pub fn is_stable(&self) -> bool {
        self.lambda < self.mu * self.total_capacity()
    }
}

/// Snaps a capacity ratio to the nearest integer when round-off is the only
/// thing separating them, so floor/ceil cannot flip on exact ratios.
fn snapped_ratio(k: usize, from: f64, to: f64) -> f64 {
    let r = to * k as f64 / from;
    let nearest = r.round();
    if (r - nearest).abs() <= 1e-12 * nearest.abs().max(1.0) {
        nearest
    } else {
        r
    }
}

/// `floor(C_j k / C_i) + 1`: the lowest type-`j` occupancy that strictly loses
/// a rate comparison against a type-`i` server holding `k` jobs.
pub fn k_under(k: usize, i: usize, j: usize, spec: &ClusterSpec) -> usize {
    let r = snapped_ratio(k, spec.capacity[i], spec.capacity[j]);
    r.floor() as usize + 1
}

/// `ceil(C_j k / C_i)`: the lowest type-`j` occupancy that ties or loses the
/// same comparison.
pub fn k_tilde(k: usize, i: usize, j: usize, spec: &ClusterSpec) -> usize {
    let r = snapped_ratio(k, spec.capacity[i], spec.capacity[j]);
    r.ceil() as usize
}

#[derive(Debug, Error)]
pub enum TailStateError {
    #[error("state must have at least one type")]
    Empty,
    #[error("all types must share the same depth")]
    RaggedDepth,
    #[error("u_0 must be exactly 1 for type {0}")]
    HeadNotOne(usize),
    #[error("sequence for type {j} violates 1 >= u_n >= u_(n+1) >= 0 at n={n}")]
    NotMonotone { j: usize, n: usize },
}

#[derive(Debug, Error)]
#[error("dimension mismatch: ({0} types, depth {1}) vs ({2} types, depth {3})")]
pub struct DimensionMismatch(usize, usize, usize, usize);

/// Truncated element of the per-type tail-sequence space: `u[j][n]` is the
/// fraction of type-`j` servers with at least `n` jobs, `0 <= n <= K`, with
/// `u[j][0] = 1` and each sequence nonincreasing in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailState {
    u: Vec<Vec<f64>>,
}

impl TailState {
    pub fn new(u: Vec<Vec<f64>>) -> Result<Self, TailStateError> {
        if u.is_empty() {
            return Err(TailStateError::Empty);
        }
        let len = u[0].len();
        if len == 0 || u.iter().any(|s| s.len() != len) {
            return Err(TailStateError::RaggedDepth);
        }
        for (j, seq) in u.iter().enumerate() {
            if seq[0] != 1.0 {
                return Err(TailStateError::HeadNotOne(j));
            }
            for n in 0..seq.len() {
                let next = if n + 1 < seq.len() { seq[n + 1] } else { 0.0 };
                if !(seq[n] <= 1.0 && seq[n] >= next && next >= 0.0) {
                    return Err(TailStateError::NotMonotone { j, n });
                }
            }
        }
        Ok(Self { u })
    }

    /// Repairs raw per-type sequences into a valid state: clamp to [0,1],
    /// re-impose monotonicity by a running max from the tail, pin `u_0 = 1`.
    pub fn from_projected(mut u: Vec<Vec<f64>>) -> Self {
        for seq in &mut u {
            let mut running = 0.0f64;
            for x in seq.iter_mut().rev() {
                *x = x.clamp(0.0, 1.0).max(running);
                running = *x;
            }
            seq[0] = 1.0;
        }
        Self { u }
    }

    /// The empty system: `u_0 = 1`, everything deeper zero.
    pub fn empty(num_types: usize, depth: usize) -> Self {
        let mut u = vec![vec![0.0; depth + 1]; num_types];
        for seq in &mut u {
            seq[0] = 1.0;
        }
        Self { u }
    }

    /// Geometric tails `u_n = r^n` for every type; the solver's initial
    /// iterate with `r = rho`.
    pub fn geometric(num_types: usize, depth: usize, ratio: f64) -> Self {
        let r = ratio.clamp(0.0, 1.0);
        let u = (0..num_types)
            .map(|_| (0..=depth).map(|n| r.powi(n as i32)).collect())
            .collect();
        Self { u }
    }

    pub fn num_types(&self) -> usize {
        self.u.len()
    }

    /// Truncation depth `K` (sequences have `K + 1` entries).
    pub fn depth(&self) -> usize {
        self.u[0].len() - 1
    }

    /// `u_n^(j)`, reading indices beyond the truncation as zero.
    #[inline]
    pub fn get(&self, j: usize, n: usize) -> f64 {
        self.u[j].get(n).copied().unwrap_or(0.0)
    }

    pub fn sequences(&self) -> &[Vec<f64>] {
        &self.u
    }

    /// Largest per-type mass left at the truncation boundary; callers use it
    /// to detect an inadequate depth.
    pub fn tail_mass(&self) -> f64 {
        let k = self.depth();
        self.u.iter().map(|s| s[k]).fold(0.0, f64::max)
    }

    /// Weighted sup metric `sup_j sup_n |u_n^(j) - w_n^(j)| / (n + 1)`.
    pub fn metric_distance(&self, other: &TailState) -> Result<f64, DimensionMismatch> {
        if self.num_types() != other.num_types() || self.depth() != other.depth() {
            return Err(DimensionMismatch(
                self.num_types(),
                self.depth(),
                other.num_types(),
                other.depth(),
            ));
        }
        let mut sup = 0.0f64;
        for (a, b) in self.u.iter().zip(&other.u) {
            for (n, (x, y)) in a.iter().zip(b).enumerate() {
                sup = sup.max((x - y).abs() / (n + 1) as f64);
            }
        }
        Ok(sup)
    }

    /// True componentwise `<=` up to `tol`.
    pub fn le_componentwise(&self, other: &TailState, tol: f64) -> bool {
        self.u
            .iter()
            .zip(&other.u)
            .all(|(a, b)| a.iter().zip(b).all(|(x, y)| *x <= *y + tol))
    }
}
