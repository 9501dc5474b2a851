//! Command-line front end for two-axis diffusion reconstruction.

pub mod commands;
pub mod config;
pub mod exit;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::Overrides;
use exit::{CliError, ExitCode};

#[derive(Debug, Parser)]
#[command(name = "tpdm", version, about = "Two-axis diffusion priors for 3D inverse problems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the seed of the selected command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Maximum worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Synthesise phantom volumes and their measurements.
    Phantom,
    /// Train the primary and auxiliary score models.
    Train,
    /// Reconstruct a volume from stored measurements.
    Reconstruct,
    /// Draw an unconditional sample.
    Generate,
    /// Compare volumes against references.
    Evaluate,
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::new(ExitCode::Config, "--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::new(ExitCode::Failure, e.to_string()))?;
    }
    let path = cli.config.as_ref().ok_or_else(|| {
        CliError::new(ExitCode::Config, "--config PATH is required")
    })?;
    let cfg = config::load_config(path)?;
    let ov = Overrides { seed: cli.seed };
    let out = &cli.out;
    match cli.command {
        Command::Phantom => commands::cmd_phantom(&cfg, &ov, out),
        Command::Train => commands::cmd_train(&cfg, &ov, out),
        Command::Reconstruct => commands::cmd_reconstruct(&cfg, &ov, out),
        Command::Generate => commands::cmd_generate(&cfg, &ov, out),
        Command::Evaluate => commands::cmd_evaluate(&cfg, &ov, out),
    }
}
