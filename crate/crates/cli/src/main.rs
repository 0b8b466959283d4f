//! `grlprompt`: train, evaluate and apply prompt-selection policies.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a configuration
//! or validation failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use grlprompt::trainer::{EnvKind, SelectMode, SweepAxis};
use grlprompt::{DatasetFormat, Variant};

use crate::config::{parse_env_kind, parse_splits, ConfigError, Overrides};

#[derive(Debug, Parser)]
#[command(name = "grlprompt", version, about = "Learned selection and ordering of in-context examples")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Run configuration file (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// mock or http
    #[arg(long, global = true, value_parser = parse_env_kind)]
    env: Option<EnvKind>,
    /// Prompt template file.
    #[arg(long, global = true)]
    template: Option<PathBuf>,
    /// Weight of the fuzzy-text term in the reward.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    k_max: Option<usize>,
    /// full, no-kg or knn-select
    #[arg(long, global = true)]
    variant: Option<Variant>,
    #[arg(long, global = true)]
    hgt_layers: Option<usize>,
    #[arg(long, global = true)]
    heads: Option<usize>,
    /// Embedding and model width.
    #[arg(long, global = true)]
    dim: Option<usize>,
    /// Dataset file (JSON lines).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// alpaca or dolly
    #[arg(long, global = true, value_parser = |s: &str| s.parse::<DatasetFormat>().map_err(|e| e.to_string()))]
    format: Option<DatasetFormat>,
    /// Train, validation and test sizes, e.g. 200,800,800.
    #[arg(long, global = true, value_parser = parse_splits)]
    splits: Option<[usize; 3]>,
    #[arg(long, global = true)]
    pool_size: Option<usize>,
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out_dir: self.out_dir.clone(),
            env: self.env,
            template: self.template.clone(),
            lambda: self.lambda,
            k_max: self.k_max,
            variant: self.variant,
            hgt_layers: self.hgt_layers,
            heads: self.heads,
            dim: self.dim,
            dataset: self.dataset.clone(),
            format: self.format,
            splits: self.splits,
            pool_size: self.pool_size,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a policy and write a checkpoint and a JSON-lines log.
    Train(TrainArgs),
    /// Score a checkpoint on a data split.
    Eval(EvalArgs),
    /// Select and order examples for one query.
    Optimize(OptimizeArgs),
    /// Train and evaluate once per value of one parameter.
    Sweep(SweepArgs),
    /// Dump the graph built for one query as JSON.
    InspectGraph(InspectArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    max_updates: Option<u64>,
    /// Train without a reward baseline.
    #[arg(long)]
    no_baseline: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    #[arg(long, value_parser = parse_mode, default_value = "greedy")]
    mode: SelectMode,
    /// Also write the JSON report here.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    query: String,
    /// Send the prompt to the environment and print the response.
    #[arg(long)]
    call_env: bool,
    #[arg(long)]
    json: bool,
    /// Truncate example texts to this many characters.
    #[arg(long, default_value_t = 60)]
    max_chars: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// lambda or hgt-layers
    #[arg(long)]
    axis: SweepAxis,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    grid: Vec<f64>,
    /// Split each point is evaluated on.
    #[arg(long, value_enum, default_value = "val")]
    split: SplitName,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Query text; defaults to the first test query.
    #[arg(long)]
    query: Option<String>,
    /// Include the feature matrix values.
    #[arg(long)]
    full: bool,
    #[arg(long, default_value_t = 60)]
    max_chars: usize,
}

fn parse_mode(s: &str) -> Result<SelectMode, String> {
    match s {
        "greedy" => Ok(SelectMode::Greedy),
        "sample" => Ok(SelectMode::Sample),
        _ => Err(format!("unknown mode `{s}` (expected greedy or sample)")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => commands::train(&cli.global, args),
        Command::Eval(args) => commands::eval(&cli.global, args),
        Command::Optimize(args) => commands::optimize(&cli.global, args),
        Command::Sweep(args) => commands::sweep(&cli.global, args),
        Command::InspectGraph(args) => commands::inspect_graph(&cli.global, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
