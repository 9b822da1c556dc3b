//! `dfm`: dataset synthesis, training, sampling, evaluation and sweeps for
//! discrete flow models.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage, 3 training diverged,
//! 4 incompatible configuration.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dfm::sampler::{FinalFill, Scheme};
use dfm::DfmError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("incompatible configuration: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Core(#[from] DfmError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Incompatible(_) => 4,
            CliError::Core(DfmError::TrainingDiverged { .. }) => 3,
            CliError::Core(DfmError::Incompatible(_)) => 4,
            CliError::Core(DfmError::Mode(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "dfm",
    version,
    about = "Discrete flow model experiments",
    after_help = "Exit codes: 0 success, 1 other failure, 2 usage, 3 training diverged, 4 incompatible configuration."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset.
    MakeData(MakeDataArgs),
    /// Train an MLP denoiser; writes a checkpoint and a loss trace.
    Train(TrainArgs),
    /// Generate samples and jump records.
    Sample(SampleArgs),
    /// Compute metrics for a set of samples.
    Eval(EvalArgs),
    /// Sample and evaluate over a grid of eta and temperature.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long, short)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    PointMass,
    IidUniform,
    MarkovChain,
    Parity,
    StructuredToy,
    CorrelatedPair,
    GaussianMixtureLabeled,
}

#[derive(Args, Debug)]
pub struct MakeDataArgs {
    #[arg(long, value_enum)]
    pub family: Family,
    #[arg(long, default_value_t = 2)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub dims: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// point_mass: the sequence.
    #[arg(long, value_delimiter = ',')]
    pub point: Vec<u32>,
    /// markov_chain: initial law; omit with --transition for a random chain.
    #[arg(long, value_delimiter = ',')]
    pub initial: Vec<f64>,
    /// markov_chain: rows separated by ';', entries by ','.
    #[arg(long)]
    pub transition: Option<String>,
    /// gaussian_mixture_labeled: component weights.
    #[arg(long, value_delimiter = ',')]
    pub weights: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub means: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// gaussian_mixture_labeled: number of points.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Weight each cross-entropy term by 1/(1 − t).
    #[arg(long)]
    pub weighted: Option<bool>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeArg {
    FactorizedEuler,
    SampleThenPlug,
    MaskingFast,
    MaskingPurity,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::FactorizedEuler => Scheme::FactorizedEuler,
            SchemeArg::SampleThenPlug => Scheme::SampleThenPlug,
            SchemeArg::MaskingFast => Scheme::MaskingFast,
            SchemeArg::MaskingPurity => Scheme::MaskingPurity,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum FillArg {
    Argmax,
    Sample,
    Disabled,
}

impl From<FillArg> for FinalFill {
    fn from(f: FillArg) -> Self {
        match f {
            FillArg::Argmax => FinalFill::Argmax,
            FillArg::Sample => FinalFill::Sample,
            FillArg::Disabled => FinalFill::Disabled,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeArg {
    CoGenerate,
    FixCoords,
    FixTokens,
}

#[derive(Args, Debug, Clone)]
pub struct SamplerOverrides {
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    #[arg(long, value_enum)]
    pub final_fill: Option<FillArg>,
    /// Use this MLP checkpoint instead of the configured denoiser.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub sampler: SamplerOverrides,
    /// Number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    /// Joint data only.
    #[arg(long, value_enum, default_value = "co-generate")]
    pub mode: ModeArg,
    /// Conditioning values for fix-coords or fix-tokens.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub condition: Vec<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Samples JSON; defaults to `<out_dir>/samples.json`.
    #[arg(long)]
    pub samples: Option<PathBuf>,
    /// Jump records; defaults to `<out_dir>/trajectories.jsonl`.
    #[arg(long)]
    pub trajectories: Option<PathBuf>,
    /// Reference data file replacing the configured data.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_delimiter = ',')]
    pub etas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub temperatures: Option<Vec<f64>>,
    #[arg(long)]
    pub n: Option<usize>,
    #[command(flatten)]
    pub sampler: SamplerOverrides,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::MakeData(a) => commands::make_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Sweep(a) => commands::sweep(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
