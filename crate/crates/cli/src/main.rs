use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod error;
mod run;

#[derive(Parser, Debug)]
#[command(name = "glgm-r2", version, about = "Coefficients of determination for geostatistical models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset and write it with the generating truth.
    Simulate(SimulateArgs),
    /// Fit a geostatistical model and write a model artifact.
    Fit(FitArgs),
    /// R² of a fitted model, plus the partial R² given a second artifact.
    R2(R2Args),
    /// Per-site prevalence standard errors with and without covariates.
    SeCompare(SeCompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 90 sites, binomial, planar trend (coordinates in km).
    Liberia,
    /// 100 sites on the unit square, binomial, one iid covariate.
    Unit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyArg {
    Binomial,
    Gaussian,
    Poisson,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Built-in configuration.
    #[arg(long, value_enum, conflicts_with = "spec")]
    pub preset: Option<Preset>,
    /// Simulation spec as JSON.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Override the number of sites.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SamplerArgs {
    #[arg(long, default_value_t = 10_000)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 8)]
    pub thin: usize,
    /// Retained posterior draws.
    #[arg(long, default_value_t = 1_000)]
    pub samples: usize,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Input CSV with columns id, x1, x2, m, y and covariates.
    #[arg(long)]
    pub data: PathBuf,
    /// Accept coordinates that look like longitude/latitude.
    #[arg(long)]
    pub force_planar: bool,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long, value_enum, default_value = "binomial")]
    pub family: FamilyArg,
    /// Covariate columns, comma separated; omit for an intercept-only model.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    /// Required for binomial fits.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long, default_value_t = 5)]
    pub max_updates: usize,
    /// Initial process variance.
    #[arg(long)]
    pub sigma2_init: Option<f64>,
    /// Initial range.
    #[arg(long)]
    pub phi_init: Option<f64>,
    /// Fail if the reference loop does not settle.
    #[arg(long)]
    pub require_convergence: bool,
    #[arg(long, default_value = "model.json")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct R2Args {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long)]
    pub artifact: PathBuf,
    /// Intercept-only artifact for the partial R².
    #[arg(long)]
    pub artifact_without: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Also write the posterior draws (B rows, one column per site).
    #[arg(long)]
    pub draws_csv: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct SeCompareArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long)]
    pub artifact_with: PathBuf,
    #[arg(long)]
    pub artifact_without: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => run::simulate(&a),
        Command::Fit(a) => run::fit(&a),
        Command::R2(a) => run::r2(&a),
        Command::SeCompare(a) => run::se_compare(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
