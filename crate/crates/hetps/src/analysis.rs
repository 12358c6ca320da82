//! Theory-vs-simulation experiment tables: accuracy against N, scheme
//! comparisons, job-size insensitivity, and stability drift checks.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::Serialize;

use crate::cluster::{ClusterSpec, Scheme};
use crate::equilibrium::{fixed_point, mean_sojourn, FixedPointOptions};
use crate::sim::engine::{run_markov, Cluster, EventObserver};
use crate::sim::{
    make_policy, optimize_routing_probs, proportional_probs, simulate, DispatchKind, EngineChoice,
    JobDist, SimConfig,
};
use crate::stats::{mean_ci, ols_slope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Theory,
    Simulation,
}

/// One cell of a comparison table. Theory rows carry `n = 0` and `ci95 = 0`.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub lambda: f64,
    pub scheme: String,
    pub source: Source,
    #[serde(rename = "N")]
    pub n: usize,
    pub mean_sojourn: f64,
    pub ci95: f64,
    pub job_dist: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellFailure {
    pub lambda: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub scheme: String,
    pub error: String,
}

/// Sweep output: completed rows plus per-cell failures that did not abort
/// the rest of the sweep.
#[derive(Debug, Clone, Serialize, Default)]
pub struct SweepTable {
    pub rows: Vec<ComparisonRow>,
    pub failures: Vec<CellFailure>,
}

impl SweepTable {
    pub fn theory(&self, lambda: f64) -> Option<&ComparisonRow> {
        self.rows
            .iter()
            .find(|r| r.source == Source::Theory && r.lambda == lambda)
    }

    pub fn simulation(&self, lambda: f64, n: usize) -> impl Iterator<Item = &ComparisonRow> {
        self.rows
            .iter()
            .filter(move |r| r.source == Source::Simulation && r.lambda == lambda && r.n == n)
    }
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub replications: usize,
    pub horizon: f64,
    pub seed: u64,
    pub engine: EngineChoice,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            replications: 10,
            horizon: 2e4,
            seed: 0x5eed,
            engine: EngineChoice::Auto,
        }
    }
}

fn theory_row(spec: &ClusterSpec, scheme: Scheme) -> Result<ComparisonRow, String> {
    let p = fixed_point(spec, scheme, &FixedPointOptions::default()).map_err(|e| e.to_string())?;
    Ok(ComparisonRow {
        lambda: spec.lambda(),
        scheme: DispatchKind::from(scheme).name().to_string(),
        source: Source::Theory,
        n: 0,
        mean_sojourn: mean_sojourn(&p, spec),
        ci95: 0.0,
        job_dist: None,
    })
}

fn sim_row(cfg: &SimConfig, opts: &SweepOptions) -> Result<ComparisonRow, String> {
    let (stats, _) = simulate(cfg, opts.replications).map_err(|e| e.to_string())?;
    Ok(ComparisonRow {
        lambda: cfg.spec.lambda(),
        scheme: cfg.policy.name().to_string(),
        source: Source::Simulation,
        n: cfg.n,
        mean_sojourn: stats.mean_sojourn,
        ci95: stats.ci95.unwrap_or(f64::NAN),
        job_dist: Some(cfg.job_dist.name().to_string()),
    })
}

/// Relative error between simulation and theory per `(lambda, N)` cell for
/// one scheme, across a list of system sizes.
pub fn error_vs_n(
    spec: &ClusterSpec,
    scheme: Scheme,
    lambdas: &[f64],
    ns: &[usize],
    opts: &SweepOptions,
) -> SweepTable {
    let mut table = SweepTable::default();
    let kind = DispatchKind::from(scheme);
    for &lambda in lambdas {
        let at = match spec.with_lambda(lambda) {
            Ok(s) => s,
            Err(e) => {
                table.failures.push(CellFailure {
                    lambda,
                    n: 0,
                    scheme: kind.name().into(),
                    error: e.to_string(),
                });
                continue;
            }
        };
        match theory_row(&at, scheme) {
            Ok(row) => table.rows.push(row),
            Err(error) => {
                table.failures.push(CellFailure {
                    lambda,
                    n: 0,
                    scheme: kind.name().into(),
                    error,
                });
                continue;
            }
        }
        // cells are independent; run them in parallel
        let cells: Vec<_> = ns
            .par_iter()
            .map(|&n| {
                let mut cfg = SimConfig::new(at.clone(), n, kind, opts.horizon, opts.seed);
                cfg.engine = opts.engine;
                sim_row(&cfg, opts).map_err(|error| CellFailure {
                    lambda,
                    n,
                    scheme: kind.name().into(),
                    error,
                })
            })
            .collect();
        for cell in cells {
            match cell {
                Ok(row) => table.rows.push(row),
                Err(f) => table.failures.push(f),
            }
        }
    }
    table
}

/// Per-N relative errors |sim - theory| / theory averaged over the lambda
/// grid of a completed `error_vs_n` table.
pub fn mean_relative_errors(table: &SweepTable, ns: &[usize]) -> Vec<(usize, f64)> {
    ns.iter()
        .map(|&n| {
            let mut errs = Vec::new();
            for row in table
                .rows
                .iter()
                .filter(|r| r.source == Source::Simulation && r.n == n)
            {
                if let Some(theory) = table.theory(row.lambda) {
                    errs.push((row.mean_sojourn - theory.mean_sojourn).abs() / theory.mean_sojourn);
                }
            }
            (n, crate::stats::mean(&errs))
        })
        .collect()
}

/// How the probability-routed baselines pick their routing vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineProbs {
    /// Grid-search optimum of the baseline's own theoretical sojourn.
    Optimized,
    /// Capacity-share probabilities `gamma_j C_j / sum gamma C`.
    FixedProportional,
}

/// All four dispatch policies at each lambda on a shared seed schedule.
/// Simulations run on the residual-work engine so that runs differ only in
/// their decision paths.
pub fn scheme_comparison(
    spec: &ClusterSpec,
    lambdas: &[f64],
    n: usize,
    baseline: BaselineProbs,
    opts: &SweepOptions,
) -> SweepTable {
    let mut table = SweepTable::default();
    for &lambda in lambdas {
        let at = match spec.with_lambda(lambda) {
            Ok(s) => s,
            Err(e) => {
                table.failures.push(CellFailure {
                    lambda,
                    n: 0,
                    scheme: "all".into(),
                    error: e.to_string(),
                });
                continue;
            }
        };
        for scheme in [Scheme::One, Scheme::Two] {
            match theory_row(&at, scheme) {
                Ok(row) => table.rows.push(row),
                Err(error) => table.failures.push(CellFailure {
                    lambda,
                    n: 0,
                    scheme: DispatchKind::from(scheme).name().into(),
                    error,
                }),
            }
        }
        let cells: Vec<_> = DispatchKind::ALL
            .par_iter()
            .map(|&kind| {
                let mut cfg = SimConfig::new(at.clone(), n, kind, opts.horizon, opts.seed);
                cfg.engine = EngineChoice::Residual;
                if matches!(
                    kind,
                    DispatchKind::StateIndependent | DispatchKind::HybridSqd
                ) {
                    cfg.routing_probs = Some(match baseline {
                        BaselineProbs::FixedProportional => proportional_probs(&at),
                        BaselineProbs::Optimized => optimize_routing_probs(&at, kind)
                            .unwrap_or_else(|| proportional_probs(&at)),
                    });
                }
                sim_row(&cfg, opts).map_err(|error| CellFailure {
                    lambda,
                    n,
                    scheme: kind.name().into(),
                    error,
                })
            })
            .collect();
        for cell in cells {
            match cell {
                Ok(row) => table.rows.push(row),
                Err(f) => table.failures.push(f),
            }
        }
    }
    table
}

/// Theory column against simulations under exponential, constant, and
/// power-law job sizes (scheme 1), all streams shared across distributions.
pub fn insensitivity_table(
    spec: &ClusterSpec,
    lambdas: &[f64],
    n: usize,
    opts: &SweepOptions,
) -> SweepTable {
    let mut table = SweepTable::default();
    for &lambda in lambdas {
        let at = match spec.with_lambda(lambda) {
            Ok(s) => s,
            Err(e) => {
                table.failures.push(CellFailure {
                    lambda,
                    n: 0,
                    scheme: "scheme1".into(),
                    error: e.to_string(),
                });
                continue;
            }
        };
        match theory_row(&at, Scheme::One) {
            Ok(row) => table.rows.push(row),
            Err(error) => {
                table.failures.push(CellFailure {
                    lambda,
                    n: 0,
                    scheme: "scheme1".into(),
                    error,
                });
                continue;
            }
        }
        let dists = [JobDist::Exponential, JobDist::Constant, JobDist::PowerLaw];
        let cells: Vec<_> = dists
            .par_iter()
            .map(|&dist| {
                let mut cfg = SimConfig::new(
                    at.clone(),
                    n,
                    DispatchKind::Scheme1,
                    opts.horizon,
                    opts.seed,
                );
                cfg.job_dist = dist;
                cfg.engine = EngineChoice::Residual;
                sim_row(&cfg, opts).map_err(|error| CellFailure {
                    lambda,
                    n,
                    scheme: "scheme1".into(),
                    error,
                })
            })
            .collect();
        for cell in cells {
            match cell {
                Ok(row) => table.rows.push(row),
                Err(f) => table.failures.push(f),
            }
        }
    }
    table
}

/// Windowed total-occupancy drift: slope of the post-warmup total occupancy
/// against time, one OLS fit per replication, interval across replications.
#[derive(Debug, Clone, Serialize)]
pub struct DriftRow {
    pub lambda: f64,
    pub scheme: String,
    pub slope: f64,
    pub ci95: f64,
    /// CI excludes zero on the positive side.
    pub positive: bool,
    /// CI contains zero.
    pub zero_compatible: bool,
}

struct TotalSampler {
    next_t: f64,
    step: f64,
    times: Vec<f64>,
    totals: Vec<f64>,
}

impl EventObserver for TotalSampler {
    fn interval(&mut self, _t0: f64, t1: f64, _occupancy: &[u32], total: u64) {
        while self.next_t < t1 {
            self.times.push(self.next_t);
            self.totals.push(total as f64);
            self.next_t += self.step;
        }
    }
}

/// Occupancy drift for each lambda (possibly beyond the stability region)
/// and each of the two sampling schemes.
pub fn stability_sweep(
    spec: &ClusterSpec,
    lambdas: &[f64],
    n: usize,
    horizon: f64,
    replications: usize,
    seed: u64,
) -> Result<Vec<DriftRow>, crate::sim::SimError> {
    let mut rows = Vec::new();
    for &lambda in lambdas {
        let at = spec
            .with_lambda(lambda)
            .expect("lambda grid must be positive");
        for kind in [DispatchKind::Scheme1, DispatchKind::Scheme2] {
            let mut cfg = SimConfig::new(at.clone(), n, kind, horizon, seed);
            cfg.warmup = horizon / 5.0;
            let cluster = Cluster::new(&at, n)?;
            let policy = make_policy(kind, &at, None)?;
            let slopes: Vec<f64> = (0..replications as u64)
                .into_par_iter()
                .map(|rep| {
                    let mut sampler = TotalSampler {
                        next_t: cfg.warmup,
                        step: (horizon - cfg.warmup) / 400.0,
                        times: Vec::new(),
                        totals: Vec::new(),
                    };
                    run_markov(&cluster, policy.as_ref(), &cfg, rep, &mut sampler);
                    ols_slope(&sampler.times, &sampler.totals)
                })
                .collect();
            let (slope, ci95) = mean_ci(&slopes);
            rows.push(DriftRow {
                lambda,
                scheme: kind.name().into(),
                slope,
                ci95,
                positive: slope - ci95 > 0.0,
                zero_compatible: slope.abs() <= ci95,
            });
        }
    }
    Ok(rows)
}

/// CSV export of a comparison table.
pub fn write_comparison_csv<W: Write>(table: &SweepTable, mut w: W) -> io::Result<()> {
    writeln!(w, "lambda,scheme,source,N,mean_sojourn,ci95,job_dist")?;
    for r in &table.rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.lambda,
            r.scheme,
            match r.source {
                Source::Theory => "theory",
                Source::Simulation => "simulation",
            },
            r.n,
            r.mean_sojourn,
            r.ci95,
            r.job_dist.as_deref().unwrap_or("")
        )?;
    }
    Ok(())
}

pub fn write_drift_csv<W: Write>(rows: &[DriftRow], mut w: W) -> io::Result<()> {
    writeln!(w, "lambda,scheme,slope,ci95,positive,zero_compatible")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.lambda, r.scheme, r.slope, r.ci95, r.positive, r.zero_compatible
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig2_spec(lambda: f64) -> ClusterSpec {
        ClusterSpec::new(
            vec![0.5, 0.5],
            vec![2.0 / 3.0, 4.0 / 3.0],
            vec![2, 2],
            lambda,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn theory_rows_are_deterministic() {
        let spec = fig2_spec(0.5);
        let opts = SweepOptions {
            replications: 2,
            horizon: 50.0,
            seed: 9,
            engine: EngineChoice::Auto,
        };
        let a = error_vs_n(&spec, Scheme::One, &[0.5], &[], &opts);
        let b = error_vs_n(&spec, Scheme::One, &[0.5], &[], &opts);
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        write_comparison_csv(&a, &mut ca).unwrap();
        write_comparison_csv(&b, &mut cb).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a.rows.len(), 1);
    }

    #[test]
    fn failures_do_not_abort_sweep() {
        // lambda = 1.5 is unstable: theory fails there, the stable cell works
        let spec = fig2_spec(0.5);
        let opts = SweepOptions {
            replications: 2,
            horizon: 50.0,
            seed: 9,
            engine: EngineChoice::Auto,
        };
        let table = error_vs_n(&spec, Scheme::One, &[1.5, 0.5], &[10], &opts);
        assert_eq!(table.failures.len(), 1);
        assert!(table.failures[0].lambda == 1.5);
        assert!(table.theory(0.5).is_some());
        assert_eq!(table.simulation(0.5, 10).count(), 1);
    }

    #[test]
    fn small_error_vs_n_lands_near_theory() {
        let spec = fig2_spec(0.5);
        let opts = SweepOptions {
            replications: 4,
            horizon: 2000.0,
            seed: 1,
            engine: EngineChoice::Auto,
        };
        let table = error_vs_n(&spec, Scheme::One, &[0.5], &[100], &opts);
        assert!(table.failures.is_empty());
        let errs = mean_relative_errors(&table, &[100]);
        assert!(errs[0].1 < 0.05, "relative error {:?}", errs);
    }

    #[test]
    fn drift_detects_instability_quickly() {
        let spec = fig2_spec(0.5);
        let rows = stability_sweep(&spec, &[0.5, 1.3], 20, 800.0, 4, 3).unwrap();
        let stable: Vec<_> = rows.iter().filter(|r| r.lambda == 0.5).collect();
        let unstable: Vec<_> = rows.iter().filter(|r| r.lambda == 1.3).collect();
        for r in stable {
            assert!(
                r.zero_compatible || r.slope.abs() < 0.01,
                "stable case drifted: {r:?}"
            );
        }
        for r in unstable {
            assert!(r.positive, "unstable case not detected: {r:?}");
        }
    }
}
