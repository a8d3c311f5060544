mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msksd::kernels::BaseKernel;
use msksd::stein::WeightSpec;

/// Mode-sensitive kernel Stein discrepancies and generalized posteriors.
///
/// Results go to stdout as JSON; experiments also write CSV/JSON files into
/// the output directory. Exit codes: 0 success, 2 invalid input, 3 numerical
/// failure.
#[derive(Debug, Parser)]
#[command(name = "msksd", version)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON configuration file; also accepts a `config.json` written by a
    /// previous experiment run.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed. A random one is generated and recorded when absent.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for experiment files. Defaults to
    /// `<root>/<experiment>_seed<seed>` with the root taken from the config,
    /// then `MSKSD_OUT`, then `results`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Base kernel, e.g. `imq:c=1,beta=0.5` or `rbf:ell=1`.
    #[arg(long, global = true)]
    pub kernel: Option<BaseKernel>,
    /// Density weight, e.g. `identity`, `logrecip:gamma=1,eps=0.1` or
    /// `trunc:gamma=1,eps=0.1,tau=1`.
    #[arg(long, global = true)]
    pub weight: Option<WeightSpec>,
    /// Weight scale γ, applied after `--weight`.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// Learning rate α. Without it α is coupled to 1/γ.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate the squared discrepancy of a data set against a model at θ.
    Ksd(KsdArgs),
    /// Generalized posterior for a model given data.
    Fit(FitArgs),
    /// Run one of the bundled studies.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Gaussian,
    Kef,
    Mixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceKind {
    /// Gaussian KDE of the data.
    Kde,
    /// The model itself.
    Model,
    /// A standard normal reference density.
    Reference,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// One value per line; a header line is allowed.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// KEF basis size.
    #[arg(long)]
    pub p: Option<usize>,
    /// Mixture component location (components at ±mu).
    #[arg(long)]
    pub mu: Option<f64>,
    /// Mixture component scale.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Fixed mixture weight; without it the weight is the parameter.
    #[arg(long)]
    pub w1: Option<f64>,
    /// Density used inside the weight.
    #[arg(long, value_enum)]
    pub weight_source: Option<SourceKind>,
    /// KDE bandwidth (Silverman's rule by default).
    #[arg(long)]
    pub bandwidth: Option<f64>,
}

#[derive(Debug, Args)]
pub struct KsdArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Parameter value, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub theta: Option<Vec<f64>>,
    /// Also report the unweighted discrepancy.
    #[arg(long)]
    pub compare: bool,
    /// Mini-batch size.
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Subtract the sample mean before fitting.
    #[arg(long)]
    pub center: bool,
    /// Sample with random-walk Metropolis instead of the closed form.
    #[arg(long)]
    pub mcmc: bool,
    /// MCMC steps (implies `--mcmc`).
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    Location,
    Galaxy,
    Gene,
    Blindness,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Location => "location",
            Experiment::Galaxy => "galaxy",
            Experiment::Gene => "gene",
            Experiment::Blindness => "blindness",
        }
    }
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(value_enum)]
    pub name: Experiment,
    /// Contamination fractions, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub epsilon: Option<Vec<f64>>,
    /// Outlier locations for the location study, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub y: Option<Vec<f64>>,
    /// Sample size (location and blindness).
    #[arg(long)]
    pub n: Option<usize>,
    /// True mixture weight (blindness).
    #[arg(long)]
    pub w1: Option<f64>,
    /// Mixture separation (blindness).
    #[arg(long)]
    pub mu: Option<f64>,
    /// Expression data for the gene study.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Fill the wall_time_ms column.
    #[arg(long)]
    pub timing: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
