//! Subcommand implementations.
//!
//! Each command resolves its configuration in the same order — built-in
//! defaults, then the `--config` file, then command-line flags — writes its
//! artifacts into `--out`, and finishes with a `manifest.json` recording the
//! fully resolved settings. Outputs never contain timestamps, so re-running
//! a command with a manifest's config and seed reproduces them byte for
//! byte. Everything runs on one thread.

pub mod ablate;
pub mod curate;
pub mod gradcheck;
pub mod sample;
pub mod stats;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use protext_core::curation::{ingest, IngestOutcome};
use protext_core::record::ProteinRecord;

use crate::config::{load_flat, FlatConfig};
use crate::error::CliError;

/// Default seed shared by every command.
pub const DEFAULT_SEED: u64 = 42;

/// Salt separating the per-step batch-index stream from every other use of
/// the run seed. Batch indices for step `s` come from a fresh generator
/// derived from `(seed, s)`, so a resumed run draws exactly the batches the
/// uninterrupted run would have — without storing sampler state.
pub const BATCH_STREAM_SALT: u64 = 0x8F1E_6F23_BD4A_9C55;

/// Options common to every subcommand, resolved from the global flags.
pub struct Common {
    pub flat: FlatConfig,
    pub config_path: Option<PathBuf>,
    pub seed_flag: Option<u64>,
    pub out: PathBuf,
    pub strict: bool,
    pub allow_unconstrained: bool,
}

impl Common {
    pub fn resolve(
        config: Option<PathBuf>,
        seed: Option<u64>,
        out: Option<PathBuf>,
        strict: bool,
        allow_unconstrained: bool,
    ) -> Result<Common, CliError> {
        let out = out.ok_or_else(|| {
            CliError::Config("--out is required: every command writes its artifacts there".into())
        })?;
        let flat = match &config {
            Some(path) => load_flat(path)?,
            None => FlatConfig::new(),
        };
        Ok(Common {
            flat,
            config_path: config,
            seed_flag: seed,
            out,
            strict,
            allow_unconstrained,
        })
    }

    /// Final seed: default, overridden by the config file's `seed`,
    /// overridden by `--seed`.
    pub fn finish_seed(&self, from_config: u64) -> u64 {
        self.seed_flag.unwrap_or(from_config)
    }
}

/// Reads a corpus file once: returns its bytes and the parsed outcome.
pub fn read_corpus(path: &Path, strict: bool) -> Result<(Vec<u8>, IngestOutcome), CliError> {
    let bytes =
        fs::read(path).map_err(|e| CliError::Io(format!("corpus {}: {e}", path.display())))?;
    let outcome = ingest(bytes.as_slice(), strict)?;
    Ok((bytes, outcome))
}

/// Gathers the records for a batch of sampled indices.
pub fn collect_batch(records: &[ProteinRecord], ids: &[usize]) -> Vec<ProteinRecord> {
    ids.iter().map(|&i| records[i].clone()).collect()
}
