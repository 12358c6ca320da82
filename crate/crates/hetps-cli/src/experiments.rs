//! Experiment drivers: each experiment reads its parameters from the merged
//! key-value config, calls the library, and writes CSV/JSON artifacts into a
//! timestamped directory (with a `latest` pointer file beside it).

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use hetps::analysis::{
    self, error_vs_n, insensitivity_table, mean_relative_errors, scheme_comparison,
    stability_sweep, BaselineProbs, Source, SweepOptions,
};
use hetps::cluster::{ClusterSpec, Scheme, TailState, DEFAULT_DEPTH};
use hetps::config::KvMap;
use hetps::equilibrium::{
    arrival_rate_profile, fixed_point, write_equilibrium_csv, EquilibriumSummary, FixedPointOptions,
};
use hetps::meanfield::{integrate, write_trajectory_csv, IntegrateOptions};
use hetps::sim::{
    chaos_diagnostic, proportional_probs, simulate, DispatchKind, EngineChoice, JobDist, SimConfig,
};

use crate::{RunError, EXIT_SOLVER};

pub struct Plan {
    pub experiment: String,
    pub kv: KvMap,
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
    pub replications: Option<usize>,
    pub quiet: bool,
}

const EXPERIMENTS: &[&str] = &[
    "fixed_point",
    "integrate",
    "simulate",
    "error_vs_n",
    "scheme_comparison",
    "insensitivity",
    "stability_sweep",
    "chaos",
];

pub fn run(plan: Plan) -> Result<(), RunError> {
    if !EXPERIMENTS.contains(&plan.experiment.as_str()) {
        return Err(RunError::config(format!(
            "unknown experiment `{}`; expected one of {}",
            plan.experiment,
            EXPERIMENTS.join(", ")
        )));
    }
    let spec = plan
        .kv
        .cluster_spec()
        .map_err(|e| RunError::config(e.to_string()))?;
    let dir = artifact_dir(&plan.out_dir, &plan.experiment)?;
    let outcome = match plan.experiment.as_str() {
        "fixed_point" => run_fixed_point(&plan, &spec, &dir),
        "integrate" => run_integrate(&plan, &spec, &dir),
        "simulate" => run_simulate(&plan, &spec, &dir),
        "error_vs_n" => run_error_vs_n(&plan, &spec, &dir),
        "scheme_comparison" => run_scheme_comparison(&plan, &spec, &dir),
        "insensitivity" => run_insensitivity(&plan, &spec, &dir),
        "stability_sweep" => run_stability(&plan, &spec, &dir),
        "chaos" => run_chaos(&plan, &spec, &dir),
        _ => unreachable!(),
    };
    if outcome.is_ok() {
        println!("artifacts: {}", dir.display());
    }
    outcome
}

fn artifact_dir(out: &Path, experiment: &str) -> Result<PathBuf, RunError> {
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S%.3f");
    let mut name = format!("{experiment}_{stamp}");
    let mut dir = out.join(&name);
    let mut salt = 0;
    while dir.exists() {
        salt += 1;
        name = format!("{experiment}_{stamp}-{salt}");
        dir = out.join(&name);
    }
    fs::create_dir_all(&dir).map_err(|e| RunError::config(format!("cannot create {name}: {e}")))?;
    fs::write(out.join("latest"), &name)
        .map_err(|e| RunError::config(format!("cannot write latest pointer: {e}")))?;
    Ok(dir)
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<(), RunError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(dir.join(name), text)
        .map_err(|e| RunError::config(format!("cannot write {name}: {e}")))
}

// ---- config extraction helpers -------------------------------------------

fn scheme_of(plan: &Plan) -> Result<Scheme, RunError> {
    match plan.kv.get("scheme").unwrap_or("scheme1") {
        "scheme1" => Ok(Scheme::One),
        "scheme2" => Ok(Scheme::Two),
        other => Err(RunError::config(format!(
            "`{other}` is not a mean-field scheme (scheme1|scheme2)"
        ))),
    }
}

fn policy_of(plan: &Plan) -> Result<DispatchKind, RunError> {
    let name = plan.kv.get("scheme").unwrap_or("scheme1");
    DispatchKind::from_name(name)
        .ok_or_else(|| RunError::config(format!("unknown dispatch policy `{name}`")))
}

fn dist_of(plan: &Plan) -> Result<JobDist, RunError> {
    let name = plan.kv.get("dist").unwrap_or("exponential");
    JobDist::from_name(name)
        .ok_or_else(|| RunError::config(format!("unknown job distribution `{name}`")))
}

fn kv_f64(plan: &Plan, key: &str, default: f64) -> Result<f64, RunError> {
    plan.kv
        .f64(key)
        .map_err(|e| RunError::config(e.to_string()))
        .map(|v| v.unwrap_or(default))
}

fn kv_usize(plan: &Plan, key: &str, default: usize) -> Result<usize, RunError> {
    plan.kv
        .u64(key)
        .map_err(|e| RunError::config(e.to_string()))
        .map(|v| v.map(|x| x as usize).unwrap_or(default))
}

fn kv_list(plan: &Plan, key: &str, default: &[f64]) -> Result<Vec<f64>, RunError> {
    plan.kv
        .f64_list(key)
        .map_err(|e| RunError::config(e.to_string()))
        .map(|v| v.unwrap_or_else(|| default.to_vec()))
}

fn seed_of(plan: &Plan) -> Result<u64, RunError> {
    if let Some(s) = plan.seed {
        return Ok(s);
    }
    plan.kv
        .u64("seed")
        .map_err(|e| RunError::config(e.to_string()))
        .map(|v| v.unwrap_or(0x5eed))
}

fn reps_of(plan: &Plan) -> Result<usize, RunError> {
    if let Some(r) = plan.replications {
        return Ok(r);
    }
    kv_usize(plan, "replications", 10)
}

fn sim_config(plan: &Plan, spec: &ClusterSpec) -> Result<SimConfig, RunError> {
    let horizon = kv_f64(plan, "horizon", 2e4)?;
    let mut cfg = SimConfig::new(
        spec.clone(),
        kv_usize(plan, "N", 100)?,
        policy_of(plan)?,
        horizon,
        seed_of(plan)?,
    );
    cfg.warmup = kv_f64(plan, "warmup", horizon / 5.0)?;
    cfg.job_dist = dist_of(plan)?;
    if let Some(p) = plan
        .kv
        .f64_list("probs")
        .map_err(|e| RunError::config(e.to_string()))?
    {
        cfg.routing_probs = Some(p);
    } else if matches!(
        cfg.policy,
        DispatchKind::StateIndependent | DispatchKind::HybridSqd
    ) {
        cfg.routing_probs = Some(proportional_probs(spec));
    }
    Ok(cfg)
}

fn sweep_options(plan: &Plan) -> Result<SweepOptions, RunError> {
    Ok(SweepOptions {
        replications: reps_of(plan)?,
        horizon: kv_f64(plan, "horizon", 2e4)?,
        seed: seed_of(plan)?,
        engine: EngineChoice::Auto,
    })
}

// ---- experiments ----------------------------------------------------------

fn run_fixed_point(plan: &Plan, spec: &ClusterSpec, dir: &Path) -> Result<(), RunError> {
    let scheme = scheme_of(plan)?;
    let p = fixed_point(spec, scheme, &FixedPointOptions::default()).map_err(|e| RunError {
        exit: EXIT_SOLVER,
        message: e.to_string(),
    })?;
    let rates = arrival_rate_profile(&p, spec, scheme);
    let mut csv = Vec::new();
    write_equilibrium_csv(&p, &rates, &mut csv).expect("in-memory write");
    fs::write(dir.join("equilibrium.csv"), csv)
        .map_err(|e| RunError::config(format!("write equilibrium.csv: {e}")))?;
    let summary = EquilibriumSummary::build(&p, spec, scheme);
    if !plan.quiet {
        println!(
            "fixed_point: lambda={} T={:.6} residual={:.2e}",
            spec.lambda(),
            summary.mean_sojourn,
            summary.conservation_residual
        );
    }
    write_json(
        dir,
        "summary.json",
        &serde_json::to_value(&summary).expect("serializable"),
    )
}

fn run_integrate(plan: &Plan, spec: &ClusterSpec, dir: &Path) -> Result<(), RunError> {
    let scheme = scheme_of(plan)?;
    let t_end = kv_f64(plan, "t_end", 100.0)?;
    let stride = kv_usize(plan, "stride", 64)?;
    let u0 = match plan.kv.get("u0").unwrap_or("empty") {
        "empty" => TailState::empty(spec.num_types(), DEFAULT_DEPTH),
        "geometric" => TailState::geometric(spec.num_types(), DEFAULT_DEPTH, spec.rho()),
        other => return Err(RunError::config(format!("unknown u0 `{other}`"))),
    };
    let mut opts = IntegrateOptions::to_time(t_end);
    opts.stride = stride;
    if let Some(dt) = plan
        .kv
        .f64("dt")
        .map_err(|e| RunError::config(e.to_string()))?
    {
        opts.dt = Some(dt);
    }
    let traj = integrate(&u0, spec, scheme, &opts).map_err(|e| RunError::solver(e.to_string()))?;
    let mut csv = Vec::new();
    write_trajectory_csv(&traj, &mut csv).expect("in-memory write");
    fs::write(dir.join("trajectory.csv"), csv)
        .map_err(|e| RunError::config(format!("write trajectory.csv: {e}")))?;
    let mut summary = json!({
        "scheme": match scheme { Scheme::One => "scheme1", Scheme::Two => "scheme2" },
        "t_end": t_end,
        "steps_stored": traj.times.len(),
        "max_projection_displacement": traj.max_projection_displacement,
    });
    if spec.is_stable() {
        if let Ok(p) = fixed_point(spec, scheme, &FixedPointOptions::default()) {
            let dist = traj
                .final_state()
                .metric_distance(&p)
                .expect("same dimensions");
            summary["distance_to_equilibrium"] = json!(dist);
        }
    }
    if !plan.quiet {
        println!("integrate: t_end={t_end} stored={}", traj.times.len());
    }
    write_json(dir, "summary.json", &summary)
}

fn run_simulate(plan: &Plan, spec: &ClusterSpec, dir: &Path) -> Result<(), RunError> {
    let cfg = sim_config(plan, spec)?;
    let reps = reps_of(plan)?;
    let (stats, tails) = simulate(&cfg, reps).map_err(|e| RunError::config(e.to_string()))?;
    if !plan.quiet {
        println!(
            "simulate: {} lambda={} N={} T={:.4} +-{:.4} ({} jobs){}",
            stats.scheme,
            stats.lambda,
            stats.n,
            stats.mean_sojourn,
            stats.ci95.unwrap_or(f64::NAN),
            stats.jobs_counted,
            if spec.is_stable() { "" } else { " [UNSTABLE]" }
        );
    }
    let mut value = serde_json::to_value(&stats).expect("serializable");
    value["stable"] = json!(spec.is_stable());
    write_json(dir, "stats.json", &value)?;
    if plan.kv.get("rep_csv") == Some("true") {
        let mut csv = String::from("replication,mean_sojourn,jobs\n");
        for (i, (m, j)) in stats
            .per_rep_mean
            .iter()
            .zip(&stats.per_rep_jobs)
            .enumerate()
        {
            csv.push_str(&format!("{i},{m},{j}\n"));
        }
        fs::write(dir.join("replications.csv"), csv)
            .map_err(|e| RunError::config(format!("write replications.csv: {e}")))?;
    }
    let mut tails_csv = String::from("j,k,tail\n");
    for j in 0..tails.num_types() {
        for k in 0..=tails.depth() {
            tails_csv.push_str(&format!("{j},{k},{}\n", tails.get(j, k)));
        }
    }
    fs::write(dir.join("final_tails.csv"), tails_csv)
        .map_err(|e| RunError::config(format!("write final_tails.csv: {e}")))
}

fn write_table(dir: &Path, table: &analysis::SweepTable) -> Result<(), RunError> {
    let mut csv = Vec::new();
    analysis::write_comparison_csv(table, &mut csv).expect("in-memory write");
    fs::write(dir.join("comparison.csv"), csv)
        .map_err(|e| RunError::config(format!("write comparison.csv: {e}")))
}

/// Accuracy bands for the reproduction-scale system sizes, from the reported
/// relative errors (~10% at N=10, ~5% at N=20, small at N=100) with slack
/// for unspecified horizons.
const ERROR_BANDS: &[(usize, f64, f64)] = &[(10, 0.05, 0.15), (20, 0.02, 0.08), (100, 0.0, 0.03)];

fn run_error_vs_n(plan: &Plan, spec: &ClusterSpec, dir: &Path) -> Result<(), RunError> {
    let scheme = scheme_of(plan)?;
    let lambdas = kv_list(plan, "lambda_list", &[0.3, 0.5, 0.7, 0.9])?;
    let ns: Vec<usize> = kv_list(plan, "N_list", &[10.0, 20.0, 100.0])?
        .into_iter()
        .map(|x| x as usize)
        .collect();
    let opts = sweep_options(plan)?;
    let table = error_vs_n(spec, scheme, &lambdas, &ns, &opts);
    write_table(dir, &table)?;
    let errors = mean_relative_errors(&table, &ns);
    let mut checks = Vec::new();
    let mut all_ok = true;
    for (n, err) in &errors {
        if !plan.quiet {
            println!("error_vs_n: N={n} mean relative error {:.2}%", err * 100.0);
        }
        if let Some((_, lo, hi)) = ERROR_BANDS.iter().find(|(bn, ..)| bn == n) {
            let ok = err >= lo && err <= hi;
            all_ok &= ok;
            checks.push(json!({ "N": n, "error": err, "band": [lo, hi], "pass": ok }));
        } else {
            checks.push(json!({ "N": n, "error": err }));
        }
    }
    write_json(
        dir,
        "summary.json",
        &json!({ "checks": checks, "failures": table.failures, "pass": all_ok }),
    )?;
    if all_ok {
        Ok(())
    } else {
        Err(RunError::tolerance("error-vs-N bands violated"))
    }
}

fn run_scheme_comparison(plan: &Plan, spec: &ClusterSpec, dir: &Path) -> Result<(), RunError> {
    let lambdas = kv_list(plan, "lambda_list", &[0.3, 0.5, 0.7, 0.9])?;
    let n = kv_usize(plan, "N", 100)?;
    let baseline = match plan.kv.get("probs_mode").unwrap_or("optimized") {
        "optimized" => BaselineProbs::Optimized,
        "proportional" => BaselineProbs::FixedProportional,
        other => return Err(RunError::config(format!("unknown probs_mode `{other}`"))),
    };
    let opts = sweep_options(plan)?;
    let table = scheme_comparison(spec, &lambdas, n, baseline, &opts);
    write_table(dir, &table)?;
    if !plan.quiet {
        for row in &table.rows {
            if row.source == Source::Simulation {
                println!(
                    "scheme_comparison: lambda={} {} T={:.4} +-{:.4}",
                    row.lambda, row.scheme, row.mean_sojourn, row.ci95
                );
            }
        }
    }
    write_json(
        dir,
        "summary.json",
        &json!({ "baseline": baseline, "failures": table.failures }),
    )
}

fn run_insensitivity(plan: &Plan, spec: &ClusterSpec, dir: &Path) -> Result<(), RunError> {
    let lambdas = kv_list(plan, "lambda_list", &[0.2, 0.3, 0.5, 0.7, 0.8, 0.9])?;
    let n = kv_usize(plan, "N", 100)?;
    let opts = sweep_options(plan)?;
    let table = insensitivity_table(spec, &lambdas, n, &opts);
    write_table(dir, &table)?;
    let mut checks = Vec::new();
    let mut all_ok = table.failures.is_empty();
    for &lambda in &lambdas {
        let Some(theory) = table.theory(lambda) else {
            continue;
        };
        let sims: Vec<_> = table.simulation(lambda, n).collect();
        let max_theory_gap = sims
            .iter()
            .map(|r| (r.mean_sojourn - theory.mean_sojourn).abs() / theory.mean_sojourn)
            .fold(0.0, f64::max);
        let mut max_pairwise = 0.0f64;
        for a in &sims {
            for b in &sims {
                max_pairwise =
                    max_pairwise.max((a.mean_sojourn - b.mean_sojourn).abs() / a.mean_sojourn);
            }
        }
        let ok = max_theory_gap <= 0.02 && max_pairwise <= 0.01;
        all_ok &= ok;
        if !plan.quiet {
            println!(
                "insensitivity: lambda={lambda} theory={:.4} gap={:.2}% pairwise={:.2}% {}",
                theory.mean_sojourn,
                max_theory_gap * 100.0,
                max_pairwise * 100.0,
                if ok { "ok" } else { "FAIL" }
            );
        }
        checks.push(json!({
            "lambda": lambda,
            "theory": theory.mean_sojourn,
            "max_theory_gap": max_theory_gap,
            "max_pairwise_gap": max_pairwise,
            "pass": ok,
        }));
    }
    write_json(
        dir,
        "summary.json",
        &json!({ "checks": checks, "failures": table.failures, "pass": all_ok }),
    )?;
    if all_ok {
        Ok(())
    } else {
        Err(RunError::tolerance("insensitivity tolerances violated"))
    }
}

fn run_stability(plan: &Plan, spec: &ClusterSpec, dir: &Path) -> Result<(), RunError> {
    let lambdas = kv_list(plan, "lambda_list", &[0.95, 1.05])?;
    let n = kv_usize(plan, "N", 50)?;
    let horizon = kv_f64(plan, "horizon", 2000.0)?;
    let reps = reps_of(plan)?;
    let rows = stability_sweep(spec, &lambdas, n, horizon, reps, seed_of(plan)?)
        .map_err(|e| RunError::config(e.to_string()))?;
    let mut csv = Vec::new();
    analysis::write_drift_csv(&rows, &mut csv).expect("in-memory write");
    fs::write(dir.join("drift.csv"), csv)
        .map_err(|e| RunError::config(format!("write drift.csv: {e}")))?;
    let mut all_ok = true;
    let mut checks = Vec::new();
    for row in &rows {
        let stable = spec
            .with_lambda(row.lambda)
            .map(|s| s.is_stable())
            .unwrap_or(false);
        let ok = if stable {
            row.zero_compatible
        } else {
            row.positive
        };
        all_ok &= ok;
        if !plan.quiet {
            println!(
                "stability_sweep: lambda={} {} slope={:.4}+-{:.4} {}",
                row.lambda,
                row.scheme,
                row.slope,
                row.ci95,
                if ok { "ok" } else { "FAIL" }
            );
        }
        checks.push(json!({
            "lambda": row.lambda, "scheme": row.scheme, "slope": row.slope,
            "ci95": row.ci95, "expected_stable": stable, "pass": ok,
        }));
    }
    write_json(
        dir,
        "summary.json",
        &json!({ "checks": checks, "pass": all_ok }),
    )?;
    if all_ok {
        Ok(())
    } else {
        Err(RunError::tolerance("drift verdicts violated"))
    }
}

fn run_chaos(plan: &Plan, spec: &ClusterSpec, dir: &Path) -> Result<(), RunError> {
    let ns: Vec<usize> = kv_list(plan, "N_list", &[20.0, 200.0])?
        .into_iter()
        .map(|x| x as usize)
        .collect();
    let pairs = kv_usize(plan, "pairs", 20)?;
    let reps = reps_of(plan)?;
    let horizon = kv_f64(plan, "horizon", 4000.0)?;
    let mut reports = Vec::new();
    for &n in &ns {
        let mut cfg = sim_config(plan, spec)?;
        cfg.n = n;
        cfg.horizon = horizon;
        cfg.warmup = horizon / 5.0;
        let report =
            chaos_diagnostic(&cfg, pairs, reps).map_err(|e| RunError::config(e.to_string()))?;
        if !plan.quiet {
            println!(
                "chaos: N={} same_type={:+.4} cross_type={:+.4}",
                n,
                report.same_type_corr,
                report.cross_type_corr.unwrap_or(f64::NAN)
            );
        }
        reports.push(report);
    }
    let magnitudes: Vec<f64> = reports.iter().map(|r| r.magnitude()).collect();
    let decreasing = magnitudes.windows(2).all(|w| w[1] < w[0]);
    write_json(
        dir,
        "summary.json",
        &json!({ "reports": reports, "magnitudes": magnitudes, "decreasing": decreasing }),
    )?;
    Ok(())
}
