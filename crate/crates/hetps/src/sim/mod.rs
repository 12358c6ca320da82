//! Finite-N discrete-event simulation of the heterogeneous PS cluster.

pub mod coupling;
pub mod engine;
pub mod policy;
pub mod rng;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{ClusterSpec, TailState};
use crate::stats::{mean_ci, CorrAccumulator};

pub use engine::{
    empirical_tails, run_markov, run_residual, sample_servers, Cluster, EventObserver,
    SamplingState,
};
pub use policy::{make_policy, DispatchKind, DispatchPolicy, PolicyError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobDist {
    Exponential,
    Constant,
    PowerLaw,
}

impl JobDist {
    pub fn name(&self) -> &'static str {
        match self {
            JobDist::Exponential => "exponential",
            JobDist::Constant => "constant",
            JobDist::PowerLaw => "power_law",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "exponential" => Some(JobDist::Exponential),
            "constant" => Some(JobDist::Constant),
            "power_law" => Some(JobDist::PowerLaw),
            _ => None,
        }
    }
}

/// Which engine executes a run. `Auto` takes the Markov-rate engine for
/// exponential sizes and the residual-work engine otherwise; forcing
/// `Residual` keeps every stream shared across job-size distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineChoice {
    Auto,
    Markov,
    Residual,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub spec: ClusterSpec,
    pub n: usize,
    pub policy: DispatchKind,
    pub routing_probs: Option<Vec<f64>>,
    pub horizon: f64,
    pub warmup: f64,
    pub seed: u64,
    pub job_dist: JobDist,
    pub engine: EngineChoice,
}

impl SimConfig {
    pub fn new(spec: ClusterSpec, n: usize, policy: DispatchKind, horizon: f64, seed: u64) -> Self {
        Self {
            spec,
            n,
            policy,
            routing_probs: None,
            horizon,
            warmup: horizon / 5.0,
            seed,
            job_dist: JobDist::Exponential,
            engine: EngineChoice::Auto,
        }
    }

    fn validate(&self) -> Result<Cluster, SimError> {
        if !(self.horizon > 0.0) || !(self.warmup >= 0.0) || self.warmup >= self.horizon {
            return Err(SimError::BadHorizon {
                horizon: self.horizon,
                warmup: self.warmup,
            });
        }
        if let Some(p) = &self.routing_probs {
            let ok = p.len() == self.spec.num_types()
                && p.iter().all(|&x| x >= 0.0)
                && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-12;
            if !ok {
                return Err(SimError::Policy(PolicyError::BadRoutingProbs {
                    expected: self.spec.num_types(),
                }));
            }
        }
        Cluster::new(&self.spec, self.n)
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("N = {0} cannot be split into the configured cohorts")]
    BadServerCount(usize),
    #[error("N * gamma_{j} = {exact} is not a positive integer")]
    FractionalCohort { j: usize, exact: f64 },
    #[error("d_{j} = {d} exceeds the type cohort of {cohort} servers")]
    SampleExceedsCohort { j: usize, d: usize, cohort: usize },
    #[error("horizon {horizon} / warmup {warmup} are inconsistent")]
    BadHorizon { horizon: f64, warmup: f64 },
    #[error("need at least {need} replications, got {got}")]
    TooFewReplications { need: usize, got: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Outcome of one replication.
#[derive(Debug, Clone, Serialize)]
pub struct RepResult {
    pub mean_sojourn: f64,
    pub jobs_counted: u64,
    pub per_type_mean_occupancy: Vec<f64>,
    #[serde(skip)]
    pub final_tails: TailState,
}

/// Replication-level sojourn summary; the half-width is only reported from
/// five replications upward.
#[derive(Debug, Clone, Serialize)]
pub struct SojournStats {
    pub scheme: String,
    pub lambda: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub mean_sojourn: f64,
    pub ci95: Option<f64>,
    pub jobs_counted: u64,
    pub per_rep_mean: Vec<f64>,
    pub per_rep_jobs: Vec<u64>,
    pub per_type_mean_occupancy: Vec<f64>,
}

impl SojournStats {
    fn from_reps(cfg: &SimConfig, reps: &[RepResult]) -> Self {
        let per_rep_mean: Vec<f64> = reps.iter().map(|r| r.mean_sojourn).collect();
        let per_rep_jobs: Vec<u64> = reps.iter().map(|r| r.jobs_counted).collect();
        let m = cfg.spec.num_types();
        let per_type = (0..m)
            .map(|j| {
                reps.iter()
                    .map(|r| r.per_type_mean_occupancy[j])
                    .sum::<f64>()
                    / reps.len() as f64
            })
            .collect();
        let (mean, ci) = if reps.len() >= 5 {
            let (m, h) = mean_ci(&per_rep_mean);
            (m, Some(h))
        } else {
            (crate::stats::mean(&per_rep_mean), None)
        };
        SojournStats {
            scheme: cfg.policy.name().to_string(),
            lambda: cfg.spec.lambda(),
            n: cfg.n,
            mean_sojourn: mean,
            ci95: ci,
            jobs_counted: per_rep_jobs.iter().sum(),
            per_rep_mean,
            per_rep_jobs,
            per_type_mean_occupancy: per_type,
        }
    }
}

fn run_one(cluster: &Cluster, policy: &dyn DispatchPolicy, cfg: &SimConfig, rep: u64) -> RepResult {
    let use_markov = match cfg.engine {
        EngineChoice::Markov => true,
        EngineChoice::Residual => false,
        EngineChoice::Auto => cfg.job_dist == JobDist::Exponential,
    };
    if use_markov {
        engine::run_markov(cluster, policy, cfg, rep, &mut engine::NoopObserver)
    } else {
        engine::run_residual(cluster, policy, cfg, rep, &mut engine::NoopObserver)
    }
}

/// Runs `replications` independent replications (in parallel, each on its own
/// stream set) and returns the merged sojourn statistics plus the final
/// empirical tails of replication 0.
pub fn simulate(
    config: &SimConfig,
    replications: usize,
) -> Result<(SojournStats, TailState), SimError> {
    if replications == 0 {
        return Err(SimError::TooFewReplications {
            need: 1,
            got: replications,
        });
    }
    let cluster = config.validate()?;
    let policy = make_policy(config.policy, &config.spec, config.routing_probs.as_deref())?;
    let reps: Vec<RepResult> = (0..replications as u64)
        .into_par_iter()
        .map(|rep| run_one(&cluster, policy.as_ref(), config, rep))
        .collect();
    let tails = reps[0].final_tails.clone();
    Ok((SojournStats::from_reps(config, &reps), tails))
}

/// Routing probabilities proportional to per-type capacity share,
/// `p_j = gamma_j C_j / sum_i gamma_i C_i`; the fixed baseline of the
/// comparison figures and the routing of the coupling's modified scheme.
pub fn proportional_probs(spec: &ClusterSpec) -> Vec<f64> {
    let total = spec.total_capacity();
    spec.gamma()
        .iter()
        .zip(spec.capacity())
        .map(|(g, c)| g * c / total)
        .collect()
}

/// Theoretical mean sojourn of the state-independent baseline under routing
/// probabilities `p`: independent M/M/1-PS queues per type.
pub fn state_independent_sojourn(spec: &ClusterSpec, p: &[f64]) -> Option<f64> {
    let mut total = 0.0;
    for j in 0..spec.num_types() {
        let load = spec.delta(j) * p[j];
        if load >= 1.0 {
            return None;
        }
        total += spec.gamma()[j] * load / (1.0 - load);
    }
    Some(total / spec.lambda())
}

/// Theoretical mean sojourn of the hybrid SQ(d) baseline under routing
/// probabilities `p`: each type is a homogeneous power-of-d subsystem with
/// closed-form tails `a^((d^k - 1)/(d - 1))`.
pub fn hybrid_sqd_sojourn(spec: &ClusterSpec, p: &[f64]) -> Option<f64> {
    let mut total = 0.0;
    for j in 0..spec.num_types() {
        let load = spec.delta(j) * p[j];
        if load >= 1.0 {
            return None;
        }
        if load == 0.0 {
            continue;
        }
        let d = spec.samples()[j] as f64;
        let mut sum = 0.0;
        let mut expo = 1.0; // (d^k - 1)/(d - 1) for k = 1
        loop {
            let term = load.powf(expo);
            sum += term;
            if term < 1e-15 || expo > 1e9 {
                break;
            }
            expo = if spec.samples()[j] == 1 {
                expo + 1.0
            } else {
                expo * d + 1.0
            };
        }
        total += spec.gamma()[j] * sum;
    }
    Some(total / spec.lambda())
}

/// Grid search over the routing simplex at resolution 0.01 minimizing the
/// theoretical mean sojourn of the chosen baseline.
pub fn optimize_routing_probs(spec: &ClusterSpec, kind: DispatchKind) -> Option<Vec<f64>> {
    let objective = |p: &[f64]| -> Option<f64> {
        match kind {
            DispatchKind::StateIndependent => state_independent_sojourn(spec, p),
            DispatchKind::HybridSqd => hybrid_sqd_sojourn(spec, p),
            _ => None,
        }
    };
    let m = spec.num_types();
    let steps = 100usize;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut stack = vec![(Vec::<usize>::new(), steps)];
    while let Some((prefix, left)) = stack.pop() {
        if prefix.len() == m - 1 {
            let mut p: Vec<f64> = prefix.iter().map(|&k| k as f64 / steps as f64).collect();
            p.push(left as f64 / steps as f64);
            if let Some(t) = objective(&p) {
                if best.as_ref().map_or(true, |(bt, _)| t < *bt) {
                    best = Some((t, p));
                }
            }
        } else {
            for k in 0..=left {
                let mut next = prefix.clone();
                next.push(k);
                stack.push((next, left - k));
            }
        }
    }
    best.map(|(_, p)| p)
}

/// Pooled tagged-pair occupancy correlations.
#[derive(Debug, Clone, Serialize)]
pub struct ChaosReport {
    #[serde(rename = "N")]
    pub n: usize,
    pub same_type_corr: f64,
    pub cross_type_corr: Option<f64>,
    pub samples_per_pair: u64,
}

impl ChaosReport {
    /// Largest correlation magnitude over the pair categories.
    pub fn magnitude(&self) -> f64 {
        self.same_type_corr
            .abs()
            .max(self.cross_type_corr.map_or(0.0, f64::abs))
    }
}

struct PairSampler {
    next_t: f64,
    step: f64,
    horizon: f64,
    pairs: Vec<(u32, u32)>,
    accs: Vec<CorrAccumulator>,
}

impl EventObserver for PairSampler {
    fn interval(&mut self, _t0: f64, t1: f64, occupancy: &[u32], _total: u64) {
        while self.next_t < t1 && self.next_t <= self.horizon {
            for (i, &(a, b)) in self.pairs.iter().enumerate() {
                self.accs[i].push(occupancy[a as usize] as f64, occupancy[b as usize] as f64);
            }
            self.next_t += self.step;
        }
    }
}

/// Estimates stationary occupancy correlations for fixed tagged server
/// pairs: one Pearson estimate per (pair, replication) over the post-warmup
/// sampling grid, averaged within each category. Same-type pairs are taken
/// from the front of each cohort, cross-type pairs from the back, so no
/// server is tagged twice.
pub fn chaos_diagnostic(
    config: &SimConfig,
    pair_count: usize,
    replications: usize,
) -> Result<ChaosReport, SimError> {
    let cluster = config.validate()?;
    let policy = make_policy(config.policy, &config.spec, config.routing_probs.as_deref())?;
    let m = config.spec.num_types();

    let mut same_pairs = Vec::new();
    let mut cross_pairs = Vec::new();
    let per_type = (pair_count.max(2) / 2 / m).clamp(1, cluster.cohort_size(0) / 4);
    for j in 0..m {
        let cohort = cluster.cohort(j);
        for i in 0..per_type {
            let a = cohort.start + 2 * i as u32;
            let b = a + 1;
            if b < cohort.end {
                same_pairs.push((a, b));
            }
        }
    }
    if m >= 2 {
        let c0 = cluster.cohort(0);
        let c1 = cluster.cohort(1);
        let room = |c: &std::ops::Range<u32>| (c.end - c.start) as usize - 2 * per_type;
        let cross_count = (pair_count / 2).max(1).min(room(&c0)).min(room(&c1));
        for i in 0..cross_count {
            cross_pairs.push((c0.end - 1 - i as u32, c1.end - 1 - i as u32));
        }
    }

    let n_same = same_pairs.len();
    let all_pairs: Vec<(u32, u32)> = same_pairs.iter().chain(&cross_pairs).copied().collect();
    let step = 1.0;

    let per_rep: Vec<(Vec<f64>, f64)> = (0..replications as u64)
        .into_par_iter()
        .map(|rep| {
            let mut sampler = PairSampler {
                next_t: config.warmup,
                step,
                horizon: config.horizon,
                pairs: all_pairs.clone(),
                accs: vec![CorrAccumulator::default(); all_pairs.len()],
            };
            let use_markov =
                config.job_dist == JobDist::Exponential && config.engine != EngineChoice::Residual;
            if use_markov {
                engine::run_markov(&cluster, policy.as_ref(), config, rep, &mut sampler);
            } else {
                engine::run_residual(&cluster, policy.as_ref(), config, rep, &mut sampler);
            }
            let samples = sampler.accs.first().map_or(0.0, |a| a.count());
            (
                sampler.accs.iter().map(|a| a.correlation()).collect(),
                samples,
            )
        })
        .collect();

    let mut same_sum = 0.0;
    let mut cross_sum = 0.0;
    let mut samples = 0.0;
    for (corrs, count) in &per_rep {
        for (i, r) in corrs.iter().enumerate() {
            if i < n_same {
                same_sum += r;
            } else {
                cross_sum += r;
            }
        }
        samples += count;
    }
    let reps = replications.max(1) as f64;
    Ok(ChaosReport {
        n: config.n,
        same_type_corr: same_sum / (n_same.max(1) as f64 * reps),
        cross_type_corr: if cross_pairs.is_empty() {
            None
        } else {
            Some(cross_sum / (cross_pairs.len() as f64 * reps))
        },
        samples_per_pair: (samples / reps) as u64,
    })
}
