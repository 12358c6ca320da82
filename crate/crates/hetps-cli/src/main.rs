//! `hetps` — run solvers, simulations, and reproduction experiments on
//! heterogeneous processor-sharing clusters from flat key-value configs.

mod experiments;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hetps::config::KvMap;

/// Exit codes: 2 config/parse error, 3 solver non-convergence,
/// 4 tolerance failure in a reproduction suite.
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_SOLVER: u8 = 3;
pub const EXIT_TOLERANCE: u8 = 4;

#[derive(Parser)]
#[command(name = "hetps", about = "heterogeneous PS cluster dispatch toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the parsed model, load, and stability verdict.
    Describe {
        /// Path to a cluster config file.
        #[arg(long)]
        spec: PathBuf,
        /// Override config keys, e.g. `--set lambda=0.9` (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run an experiment and write its artifacts.
    Run {
        /// Experiment id: fixed_point | integrate | simulate | error_vs_n |
        /// scheme_comparison | insensitivity | stability_sweep | chaos
        #[arg(long)]
        experiment: String,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output directory (a timestamped subdirectory is created).
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        replications: Option<usize>,
        /// Suppress per-cell progress lines.
        #[arg(long)]
        quiet: bool,
    },
}

pub struct RunError {
    pub exit: u8,
    pub message: String,
}

impl RunError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            exit: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn solver(message: impl Into<String>) -> Self {
        Self {
            exit: EXIT_SOLVER,
            message: message.into(),
        }
    }

    pub fn tolerance(message: impl Into<String>) -> Self {
        Self {
            exit: EXIT_TOLERANCE,
            message: message.into(),
        }
    }
}

fn load_config(path: &PathBuf, overrides: &[String]) -> Result<KvMap, RunError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RunError::config(format!("cannot read {}: {e}", path.display())))?;
    let mut kv = KvMap::parse(&text).map_err(|e| RunError::config(e.to_string()))?;
    for assignment in overrides {
        kv.set_override(assignment)
            .map_err(|e| RunError::config(e.to_string()))?;
    }
    Ok(kv)
}

fn describe(spec_path: &PathBuf, overrides: &[String]) -> Result<(), RunError> {
    let kv = load_config(spec_path, overrides)?;
    let spec = kv
        .cluster_spec()
        .map_err(|e| RunError::config(e.to_string()))?;
    println!("M      = {}", spec.num_types());
    println!("gamma  = {:?}", spec.gamma());
    println!("C      = {:?}", spec.capacity());
    println!("d      = {:?}", spec.samples());
    println!("lambda = {}", spec.lambda());
    println!("mu     = {}", spec.mu());
    println!("rho    = {:.6}", spec.rho());
    let deltas: Vec<f64> = (0..spec.num_types()).map(|j| spec.delta(j)).collect();
    println!("Delta  = {deltas:?}");
    println!(
        "verdict: {}",
        if spec.is_stable() {
            "STABLE"
        } else {
            "UNSTABLE"
        }
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Describe { spec, set } => describe(spec, set),
        Command::Run {
            experiment,
            spec,
            set,
            out,
            seed,
            replications,
            quiet,
        } => load_config(spec, set).and_then(|kv| {
            experiments::run(experiments::Plan {
                experiment: experiment.clone(),
                kv,
                out_dir: out.clone(),
                seed: *seed,
                replications: *replications,
                quiet: *quiet,
            })
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // machine-readable error on stderr
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.message, "exit": e.exit })
            );
            ExitCode::from(e.exit)
        }
    }
}
