//! Run manifests.
//!
//! Every command writes a `manifest.json` into its output directory holding
//! the fully resolved configuration, the seed, checksums of every input
//! file, the code version, wall-clock bounds, and the list of files the run
//! produced. Re-running the same command with the manifest's config and
//! seed reproduces every output byte for byte — timestamps live only here,
//! never inside an output file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use protext_core::curation::sha256_hex;

use crate::config::FlatConfig;
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand that produced this run.
    pub command: String,
    /// Crate version baked in at compile time.
    pub code_version: String,
    /// The seed the run actually used.
    pub seed: u64,
    /// Fully resolved flat configuration (defaults, then config file, then
    /// command-line flags).
    pub config: FlatConfig,
    /// SHA-256 of each input file's bytes, keyed by the path as given.
    pub input_checksums: BTreeMap<String, String>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    /// Files the run wrote, relative to the output directory.
    pub outputs: Vec<String>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl RunManifest {
    pub fn start(command: &str, seed: u64, config: FlatConfig) -> RunManifest {
        RunManifest {
            command: command.to_owned(),
            code_version: env!("CARGO_PKG_VERSION").to_owned(),
            seed,
            config,
            input_checksums: BTreeMap::new(),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
            outputs: Vec::new(),
        }
    }

    /// Hashes an input file and records it.
    pub fn add_input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = fs::read(path)
            .map_err(|e| CliError::Io(format!("input {}: {e}", path.display())))?;
        self.add_input_bytes(path, &bytes);
        Ok(())
    }

    /// Records the checksum of input bytes the caller already holds.
    pub fn add_input_bytes(&mut self, path: &Path, bytes: &[u8]) {
        self.input_checksums
            .insert(path.display().to_string(), sha256_hex(bytes));
    }

    pub fn record_output(&mut self, name: &str) {
        self.outputs.push(name.to_owned());
    }

    /// Stamps the end time and writes `manifest.json` into `out_dir`.
    pub fn finish_and_write(mut self, out_dir: &Path) -> Result<(), CliError> {
        self.finished_unix_ms = now_ms();
        self.record_output(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self)
            .map_err(|e| CliError::Internal(format!("manifest serialization: {e}")))?;
        let path = out_dir.join(MANIFEST_FILE);
        fs::write(&path, text + "\n")
            .map_err(|e| CliError::Io(format!("manifest {}: {e}", path.display())))?;
        Ok(())
    }

}

/// Creates the output directory (parents included) if needed.
pub fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)
        .map_err(|e| CliError::Io(format!("output directory {}: {e}", out.display())))
}

/// Writes an output file and records it in the manifest.
pub fn write_output(
    manifest: &mut RunManifest,
    out_dir: &Path,
    name: &str,
    contents: &[u8],
) -> Result<PathBuf, CliError> {
    let path = out_dir.join(name);
    fs::write(&path, contents)
        .map_err(|e| CliError::Io(format!("output {}: {e}", path.display())))?;
    manifest.record_output(name);
    Ok(path)
}
