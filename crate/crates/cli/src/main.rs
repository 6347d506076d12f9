//! `sfml`: generate snapshot data, train a flow map, predict ensembles and
//! validate them against the reference simulator.
//!
//! Every relative path in a config resolves against `--out`, which defaults
//! to the directory holding the config file.

mod commands;
mod config;
mod expr;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Failure, RunContext, EXIT_CONFIG};
use config::{RunConfig, GEN_DATA_KEYS, PREDICT_KEYS, TRAIN_KEYS, VALIDATE_KEYS};

#[derive(Parser)]
#[command(name = "sfml", version, about = "Stochastic flow map learning")]
#[command(
    after_help = "Exit status: 0 ok, 2 configuration, 3 simulation, 4 training, 5 prediction, 6 validation threshold"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Root seed; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker cap. The pipeline currently runs on one worker, so any
    /// positive value gives identical results.
    #[arg(long, env = "SFML_THREADS", value_parser = clap::value_parser!(u32).range(1..))]
    threads: Option<u32>,
    /// Base directory for every relative path in the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate snapshot pairs and write a dataset.
    #[command(after_help = GEN_DATA_KEYS)]
    GenData(Common),
    /// Fit a flow to a dataset and write its checkpoint.
    #[command(after_help = TRAIN_KEYS)]
    Train(Common),
    /// Roll out an ensemble from a trained model.
    #[command(after_help = PREDICT_KEYS)]
    Predict(Common),
    /// Compare a model ensemble with the reference simulator.
    #[command(after_help = VALIDATE_KEYS)]
    Validate(Common),
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (common, cmd): (&Common, fn(&RunConfig, &RunContext) -> commands::Outcome) = match &cli.command {
        Command::GenData(c) => (c, commands::gen_data),
        Command::Train(c) => (c, commands::train),
        Command::Predict(c) => (c, commands::predict),
        Command::Validate(c) => (c, commands::validate),
    };
    let cfg = RunConfig::load(&common.config).map_err(|e| Failure::new(EXIT_CONFIG, e))?;
    let seed = common.seed.or(cfg.seed).ok_or_else(|| {
        Failure::new(
            EXIT_CONFIG,
            anyhow::anyhow!("no seed: set `seed` in the config or pass --seed"),
        )
    })?;
    let out = match &common.out {
        Some(dir) => dir.clone(),
        None => common.config.parent().map(PathBuf::from).unwrap_or_default(),
    };
    cmd(&cfg, &RunContext { seed, out })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
