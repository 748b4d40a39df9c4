//! Command-line front end: searches, strategy benchmarks, dataset builds and
//! pruner training/evaluation, all driven by one TOML run configuration.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::{load_config, ConfigError, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 2 for configuration problems, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

#[derive(Debug, Parser)]
#[command(name = "stepprune", version, about = "Equivalence-pruned reasoning search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the configured search over every problem.
    Search(RunArgs),
    /// Compare pruning strategies on one problem set.
    Bench(RunArgs),
    /// Harvest sibling pairs from traces and annotate them.
    DatasetBuild(RunArgs),
    /// Train the equivalence classifier with EM refinement.
    PrunerTrain(RunArgs),
    /// Score a trained classifier on labeled pairs.
    PrunerEval(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// `dotted.key=value`, applied in order after the file is read.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, default_value = "out")]
    pub output: PathBuf,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip problems already recorded in the output directory.
    #[arg(long)]
    pub resume: bool,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut overrides = self.overrides.clone();
        if let Some(w) = self.workers {
            overrides.push(format!("workers={w}"));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        Ok(load_config(&self.config, &overrides)?)
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let (args, cmd): (&RunArgs, fn(&RunConfig, &RunArgs) -> Result<(), CliError>) = match &cli.command {
        Command::Search(a) => (a, commands::cmd_search),
        Command::Bench(a) => (a, commands::cmd_bench),
        Command::DatasetBuild(a) => (a, commands::cmd_dataset_build),
        Command::PrunerTrain(a) => (a, commands::cmd_pruner_train),
        Command::PrunerEval(a) => (a, commands::cmd_pruner_eval),
    };
    let cfg = args.resolve()?;
    cmd(&cfg, args)
}
