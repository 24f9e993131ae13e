//! Command-line flags and TOML configuration.
//!
//! Every flag is optional at parse time. A value given on the command line
//! wins over the matching key in the `--config` file; the built-in default
//! applies last. The seed additionally falls back to `ODEKERNEL_SEED` before
//! the built-in default.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "ODEKERNEL_SEED";

#[derive(Debug, Parser)]
#[command(name = "odekernel", version, about = "Infer polynomial ODE models from sampled trajectories")]
pub struct Cli {
    /// TOML file with a top-level `seed` and one table per command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate a reference system and write a trajectory CSV.
    Generate(GenerateArgs),
    /// Fit a model to trajectory data under a discretized loss.
    Train(TrainArgs),
    /// Integrate a trained model from an initial condition.
    Simulate(SimulateArgs),
    /// Accumulated error between two trajectories.
    Evaluate(EvaluateArgs),
    /// Cubic regression comparison of all model families.
    RegressDemo(RegressDemoArgs),
}

macro_rules! overlay {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl $ty {
            /// Fills every unset field from `base`.
            pub fn overlay(self, base: Self) -> Self {
                Self { $($field: self.$field.or(base.$field)),* }
            }
        }
    };
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateArgs {
    /// Reference system (only `lorenz96`).
    #[arg(long)]
    pub system: Option<String>,
    /// Number of state variables.
    #[arg(long)]
    pub n: Option<usize>,
    /// Forcing constant.
    #[arg(long)]
    pub forcing: Option<f64>,
    #[arg(long)]
    pub t_end: Option<f64>,
    /// Samples per time unit.
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub rtol: Option<f64>,
    #[arg(long)]
    pub atol: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
overlay!(GenerateArgs { system, n, forcing, t_end, rate, rtol, atol, seed, out });

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// Trajectory CSV files; window losses are averaged over all of them.
    #[arg(long, value_delimiter = ',')]
    pub data: Option<Vec<PathBuf>>,
    /// `kernel`, `mlp` or `polyfeature`.
    #[arg(long)]
    pub model: Option<String>,
    /// Kernel order n.
    #[arg(long)]
    pub order: Option<u32>,
    /// Kernel intermediate dimension; a comma list runs a sweep.
    #[arg(long, value_delimiter = ',')]
    pub m: Option<Vec<usize>>,
    /// Hidden width of the three perceptron layers.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// `forward-euler`, `backward-euler` or `adams-moulton`.
    #[arg(long)]
    pub scheme: Option<String>,
    /// Phases as `iters@rate,iters@rate,…`.
    #[arg(long)]
    pub schedule: Option<String>,
    /// `adam` or `sgd`.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Windows per step; full batch when absent.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Stop once the loss is at or below this value.
    #[arg(long)]
    pub early_stop: Option<f64>,
    /// Feed `t` to the model as an extra input.
    #[arg(long)]
    pub time_input: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parallel training runs for a sweep.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Model JSON path; sweeps insert `-M<m>` before the extension.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report JSON path (defaults next to the model).
    #[arg(long)]
    pub report: Option<PathBuf>,
}
overlay!(TrainArgs {
    data,
    model,
    order,
    m,
    hidden,
    scheme,
    schedule,
    optimizer,
    batch,
    early_stop,
    time_input,
    seed,
    jobs,
    out,
    report
});

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Take the initial condition from this trajectory CSV.
    #[arg(long)]
    pub init_csv: Option<PathBuf>,
    /// Row of `init_csv` to start from.
    #[arg(long)]
    pub init_row: Option<usize>,
    /// Draw the initial condition from `Normal(0, 3)` with this seed when no CSV is given.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub t_end: Option<f64>,
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub rtol: Option<f64>,
    #[arg(long)]
    pub atol: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
overlay!(SimulateArgs { model, init_csv, init_row, seed, t_end, rate, rtol, atol, out });

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
overlay!(EvaluateArgs { truth, pred, out });

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressDemoArgs {
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Kernel intermediate dimension.
    #[arg(long)]
    pub m: Option<usize>,
    /// Training points on [-2, 2].
    #[arg(long)]
    pub points: Option<usize>,
    /// `grid` or `random`.
    #[arg(long)]
    pub sampling: Option<String>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub ridge_lambda: Option<f64>,
    #[arg(long)]
    pub ridge_c: Option<f64>,
    #[arg(long)]
    pub ridge_degree: Option<u32>,
    /// Parallel training runs.
    #[arg(long)]
    pub jobs: Option<usize>,
}
overlay!(RegressDemoArgs {
    out_dir,
    seed,
    m,
    points,
    sampling,
    hidden,
    schedule,
    ridge_lambda,
    ridge_c,
    ridge_degree,
    jobs
});

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub generate: GenerateArgs,
    pub train: TrainArgs,
    pub simulate: SimulateArgs,
    pub evaluate: EvaluateArgs,
    #[serde(rename = "regress-demo", alias = "regress_demo")]
    pub regress_demo: RegressDemoArgs,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

/// Seed from the flag, then the config, then `ODEKERNEL_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

pub fn required<T>(value: Option<T>, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing required --{flag}")))
}
