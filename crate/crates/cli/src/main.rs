//! Command-line driver for the protein–biotext pre-training pipeline.
//!
//! Subcommands: `curate` (validate a JSONL corpus), `stats` (confidence
//! marginals), `sample` (cluster-balanced draws), `train` (pre-training
//! with checkpoints), `gradcheck` (finite-difference gradient
//! verification), and `ablate` (weight/threshold sweeps).
//!
//! Configuration comes from a flat `key=value` file given with `--config`;
//! command-line flags override it. Every command requires `--out` and
//! writes a `manifest.json` there recording the fully resolved settings,
//! the seed, and checksums of its inputs; re-running with a manifest's
//! config and seed reproduces every output byte for byte.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration or validation
//! failure, 3 internal invariant breach.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Common;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "protext", version, about = "Protein-biotext pre-training pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Random seed, overriding the config file's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Flat key=value configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Output directory for artifacts and the run manifest.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Abort on the first malformed input record instead of skipping it.
    #[arg(long, global = true)]
    strict: bool,

    /// Permit loss-weight settings whose segment weights do not sum to 1
    /// (interference experiments).
    #[arg(long, global = true)]
    allow_unconstrained: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a JSONL corpus; write kept records, cluster counts, and a
    /// corpus manifest.
    Curate {
        /// Corpus file, one JSON record per line.
        input: PathBuf,
    },
    /// Report confidence-label marginals of a corpus.
    Stats {
        input: PathBuf,
    },
    /// Draw cluster-balanced record indices from a corpus.
    Sample {
        input: PathBuf,
        /// Number of draws (with replacement).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Pre-train on a corpus; write the loss trajectory and a checkpoint.
    Train {
        input: PathBuf,
        /// Total step count to train to.
        #[arg(long)]
        steps: Option<u64>,
        /// Resume from a checkpoint. The checkpoint supplies the full
        /// configuration; --config and --seed are rejected.
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
    },
    /// Verify analytic gradients of every loss against finite differences.
    Gradcheck,
    /// Train one run per sweep setting over weight/threshold grids.
    Ablate {
        input: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let common = Common::resolve(
        cli.config,
        cli.seed,
        cli.out,
        cli.strict,
        cli.allow_unconstrained,
    )?;
    match cli.command {
        Command::Curate { input } => commands::curate::run(&common, &input),
        Command::Stats { input } => commands::stats::run(&common, &input),
        Command::Sample { input, k } => commands::sample::run(&common, &input, k),
        Command::Train { input, steps, resume } => {
            commands::train::run(&common, &input, steps, resume.as_deref())
        }
        Command::Gradcheck => commands::gradcheck::run(&common),
        Command::Ablate { input } => commands::ablate::run(&common, &input),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(error.exit_code())
        }
    }
}
