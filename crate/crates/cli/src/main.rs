//! `trcdag` command line: data generation, training, grid search and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "trcdag",
    version,
    about = "Causal DAG discovery by reinforcement learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset and its true graph.
    Generate(GenerateArgs),
    /// Train on a dataset and write a run report.
    Train(TrainArgs),
    /// Train over an (epsilon, delta) grid and tabulate the results.
    Gridsearch(GridArgs),
    /// Compare an estimated graph with the truth.
    Eval(EvalArgs),
    /// Print the resolved configuration as TOML.
    Config(ConfigArgs),
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    #[arg(long, env = "TRCDAG_CONFIG")]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModelArg {
    LinearGaussian,
    Lingam,
    Quadratic,
    Gp,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AlgoArg {
    Reinforce,
    Psr,
    Trc,
    Ppo,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RegressorArg {
    Linear,
    Quadratic,
    Gp,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long, env = "TRCDAG_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: ModelArg,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for `data.csv`, `data.json` and `truth.json`.
    #[arg(long, env = "TRCDAG_OUT", default_value = ".")]
    pub out: PathBuf,
}

/// Options shared by `train` and `gridsearch`.
#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long, env = "TRCDAG_CONFIG")]
    pub config: Option<PathBuf>,
    /// Observation CSV with a header row.
    #[arg(long, env = "TRCDAG_DATA")]
    pub data: Option<PathBuf>,
    /// True graph (edge-list JSON or CSV matrix); defaults to the truth in the data sidecar.
    #[arg(long, env = "TRCDAG_TRUTH")]
    pub truth: Option<PathBuf>,
    #[arg(long, env = "TRCDAG_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub algo: Option<AlgoArg>,
    /// BIC variant: 1 per-node variances, 2 pooled variance.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub bic: Option<u8>,
    #[arg(long, value_enum)]
    pub regressor: Option<RegressorArg>,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_delimiter = ',')]
    pub epsilons: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub deltas: Option<Vec<f64>>,
    /// Runs per cell.
    #[arg(long)]
    pub seeds: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub estimate: PathBuf,
    #[arg(long, env = "TRCDAG_TRUTH")]
    pub truth: PathBuf,
    /// Prune the estimate against `--data` before comparing.
    #[arg(long, requires = "data")]
    pub prune: bool,
    #[arg(long, env = "TRCDAG_DATA")]
    pub data: Option<PathBuf>,
    #[arg(long, env = "TRCDAG_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub bic: Option<u8>,
    #[arg(long, value_enum)]
    pub regressor: Option<RegressorArg>,
    /// Coefficient threshold; overrides the configured value.
    #[arg(long)]
    pub threshold: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Gridsearch(a) => commands::gridsearch(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Config(a) => commands::show_config(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
