//! Command-line driver: `ctmc-guide {train-denoiser|train-predictor|sample|verify}`.
//!
//! Exit codes: 0 success, 1 failed criterion or runtime failure, 2 usage or
//! configuration error.

pub mod commands;
pub mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::Error;
use config::Resolved;

#[derive(Debug, Parser)]
#[command(name = "ctmc-guide", version, about = "Guided sampling for discrete flow models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for chain sampling.
    #[arg(long, env = "CTMC_GUIDE_JOBS")]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a neural denoiser and write its checkpoint and loss curve.
    TrainDenoiser(CommonArgs),
    /// Train a noisy predictor and write its checkpoint and loss curve.
    TrainPredictor(CommonArgs),
    /// Draw (guided) samples for every point of the configured sweep.
    Sample(CommonArgs),
    /// Run the oracle checks and write a pass/fail report.
    Verify(CommonArgs),
}

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Validation(_) | Error::EnumerationCap { .. } | Error::Io(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

/// Run a parsed command line and map the outcome to an exit code.
pub fn run(cli: Cli) -> ExitCode {
    let (Command::TrainDenoiser(args) | Command::TrainPredictor(args) | Command::Sample(args) | Command::Verify(args)) =
        &cli.command;
    let outcome = (|| -> crate::Result<bool> {
        let resolved = Resolved::load(&args.config, args.seed, args.out.clone())?;
        let mut pool = rayon::ThreadPoolBuilder::new();
        if let Some(jobs) = args.jobs {
            if jobs == 0 {
                return Err(Error::Config("--jobs must be positive".into()));
            }
            pool = pool.num_threads(jobs);
        }
        let pool = pool.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| match &cli.command {
            Command::TrainDenoiser(_) => commands::train_denoiser_cmd(&resolved).map(|()| true),
            Command::TrainPredictor(_) => commands::train_predictor_cmd(&resolved).map(|()| true),
            Command::Sample(_) => commands::sample_cmd(&resolved).map(|()| true),
            Command::Verify(_) => commands::verify_cmd(&resolved),
        })
    })();
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILURE),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
