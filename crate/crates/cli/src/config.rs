//! Flat `key=value` configuration files.
//!
//! One assignment per line; `#` starts a comment; whitespace around keys and
//! values is ignored; later assignments win. Every command validates that
//! the keys it received are ones it knows, so typos fail loudly instead of
//! silently running defaults.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use protext_core::gradcheck::CheckSettings;
use protext_core::objectives::TrainerConfig;
use protext_core::sampler::SamplingParams;

use crate::error::CliError;

pub type FlatConfig = BTreeMap<String, String>;

/// Parses flat key=value text.
pub fn parse_flat(text: &str) -> Result<FlatConfig, CliError> {
    let mut map = FlatConfig::new();
    for (index, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Config(format!(
                "config line {}: expected key=value, got {raw:?}",
                index + 1
            )));
        };
        map.insert(key.trim().to_owned(), value.trim().to_owned());
    }
    Ok(map)
}

pub fn load_flat(path: &Path) -> Result<FlatConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("config {}: {e}", path.display())))?;
    parse_flat(&text)
}

/// Tracks which keys a command consumed so leftovers can be rejected.
#[derive(Debug)]
pub struct ConfigReader<'a> {
    map: &'a FlatConfig,
    used: BTreeSet<String>,
}

impl<'a> ConfigReader<'a> {
    pub fn new(map: &'a FlatConfig) -> ConfigReader<'a> {
        ConfigReader { map, used: BTreeSet::new() }
    }

    /// Parses `key` into `target` when present.
    pub fn read<T: FromStr>(&mut self, key: &str, target: &mut T) -> Result<(), CliError>
    where
        T::Err: Display,
    {
        self.used.insert(key.to_owned());
        if let Some(raw) = self.map.get(key) {
            *target = raw.parse().map_err(|e| {
                CliError::Config(format!("config key {key}: cannot parse {raw:?}: {e}"))
            })?;
        }
        Ok(())
    }

    /// Parses `key` as a comma-separated list when present.
    pub fn read_list<T: FromStr>(&mut self, key: &str, target: &mut Vec<T>) -> Result<(), CliError>
    where
        T::Err: Display,
    {
        self.used.insert(key.to_owned());
        if let Some(raw) = self.map.get(key) {
            let mut values = Vec::new();
            for piece in raw.split(',') {
                let piece = piece.trim();
                if piece.is_empty() {
                    continue;
                }
                values.push(piece.parse().map_err(|e| {
                    CliError::Config(format!("config key {key}: cannot parse {piece:?}: {e}"))
                })?);
            }
            *target = values;
        }
        Ok(())
    }

    /// Errors on any key this command never recognized.
    pub fn finish(self) -> Result<(), CliError> {
        let unknown: Vec<&str> = self
            .map
            .keys()
            .filter(|k| !self.used.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }
}

/// Applies every trainer-related key. Returns the reader so callers can
/// consume additional command-specific keys before `finish`.
pub fn apply_trainer_keys<'a>(
    config: &mut TrainerConfig,
    flat: &'a FlatConfig,
) -> Result<ConfigReader<'a>, CliError> {
    let mut reader = ConfigReader::new(flat);
    reader.read("protein.dim", &mut config.protein.dim)?;
    reader.read("protein.layers", &mut config.protein.layers)?;
    reader.read("protein.heads", &mut config.protein.heads)?;
    reader.read("protein.ff_dim", &mut config.protein.ff_dim)?;
    reader.read("protein.max_len", &mut config.protein.max_len)?;
    reader.read("protein.dropout", &mut config.protein.dropout)?;
    reader.read("text.vocab", &mut config.text.vocab)?;
    reader.read("text.dim", &mut config.text.dim)?;
    reader.read("text.layers", &mut config.text.layers)?;
    reader.read("text.heads", &mut config.text.heads)?;
    reader.read("text.ff_dim", &mut config.text.ff_dim)?;
    reader.read("text.max_len", &mut config.text.max_len)?;
    reader.read("text.dropout", &mut config.text.dropout)?;
    reader.read("loss.tau1", &mut config.loss.tau1)?;
    reader.read("loss.tau2", &mut config.loss.tau2)?;
    reader.read("loss.theta", &mut config.loss.theta)?;
    reader.read("loss.lambda1", &mut config.loss.lambda1)?;
    reader.read("loss.lambda2", &mut config.loss.lambda2)?;
    reader.read("loss.segment_mask_rate", &mut config.loss.segment_mask_rate)?;
    reader.read("loss.mlm_rate", &mut config.loss.mlm_rate)?;
    reader.read("adam.lr", &mut config.adam.lr)?;
    reader.read("adam.beta1", &mut config.adam.beta1)?;
    reader.read("adam.beta2", &mut config.adam.beta2)?;
    reader.read("adam.eps", &mut config.adam.eps)?;
    reader.read("adam.weight_decay", &mut config.adam.weight_decay)?;
    reader.read("batch_size", &mut config.batch_size)?;
    reader.read("seed", &mut config.seed)?;
    reader.read("use_bank_prototypes", &mut config.use_bank_prototypes)?;
    reader.read("bank_decay", &mut config.bank_decay)?;
    reader.read("allow_unconstrained", &mut config.allow_unconstrained)?;
    Ok(reader)
}

/// Dumps the full resolved trainer configuration as flat keys — the exact
/// set `apply_trainer_keys` reads, so a manifest's config round-trips.
pub fn trainer_to_flat(config: &TrainerConfig) -> FlatConfig {
    let mut map = FlatConfig::new();
    let mut put = |k: &str, v: String| {
        map.insert(k.to_owned(), v);
    };
    put("protein.dim", config.protein.dim.to_string());
    put("protein.layers", config.protein.layers.to_string());
    put("protein.heads", config.protein.heads.to_string());
    put("protein.ff_dim", config.protein.ff_dim.to_string());
    put("protein.max_len", config.protein.max_len.to_string());
    put("protein.dropout", config.protein.dropout.to_string());
    put("text.vocab", config.text.vocab.to_string());
    put("text.dim", config.text.dim.to_string());
    put("text.layers", config.text.layers.to_string());
    put("text.heads", config.text.heads.to_string());
    put("text.ff_dim", config.text.ff_dim.to_string());
    put("text.max_len", config.text.max_len.to_string());
    put("text.dropout", config.text.dropout.to_string());
    put("loss.tau1", config.loss.tau1.to_string());
    put("loss.tau2", config.loss.tau2.to_string());
    put("loss.theta", config.loss.theta.to_string());
    put("loss.lambda1", config.loss.lambda1.to_string());
    put("loss.lambda2", config.loss.lambda2.to_string());
    put("loss.segment_mask_rate", config.loss.segment_mask_rate.to_string());
    put("loss.mlm_rate", config.loss.mlm_rate.to_string());
    put("adam.lr", config.adam.lr.to_string());
    put("adam.beta1", config.adam.beta1.to_string());
    put("adam.beta2", config.adam.beta2.to_string());
    put("adam.eps", config.adam.eps.to_string());
    put("adam.weight_decay", config.adam.weight_decay.to_string());
    put("batch_size", config.batch_size.to_string());
    put("seed", config.seed.to_string());
    put("use_bank_prototypes", config.use_bank_prototypes.to_string());
    put("bank_decay", config.bank_decay.to_string());
    put("allow_unconstrained", config.allow_unconstrained.to_string());
    map
}

/// Applies gradient-check keys (`gradcheck.*`).
pub fn apply_gradcheck_keys<'a>(
    settings: &mut CheckSettings,
    flat: &'a FlatConfig,
) -> Result<ConfigReader<'a>, CliError> {
    let mut reader = ConfigReader::new(flat);
    reader.read("gradcheck.dim", &mut settings.dim)?;
    reader.read("gradcheck.seq_len", &mut settings.seq_len)?;
    reader.read("gradcheck.batch", &mut settings.batch)?;
    reader.read("gradcheck.layers", &mut settings.layers)?;
    reader.read("gradcheck.tolerance", &mut settings.tolerance)?;
    reader.read("gradcheck.step", &mut settings.step)?;
    reader.read("gradcheck.coords_per_param", &mut settings.coords_per_param)?;
    reader.read("gradcheck.fault_gain", &mut settings.fault_gain)?;
    Ok(reader)
}

pub fn gradcheck_to_flat(settings: &CheckSettings) -> FlatConfig {
    let mut map = FlatConfig::new();
    map.insert("gradcheck.dim".into(), settings.dim.to_string());
    map.insert("gradcheck.seq_len".into(), settings.seq_len.to_string());
    map.insert("gradcheck.batch".into(), settings.batch.to_string());
    map.insert("gradcheck.layers".into(), settings.layers.to_string());
    map.insert("gradcheck.tolerance".into(), settings.tolerance.to_string());
    map.insert("gradcheck.step".into(), settings.step.to_string());
    map.insert("gradcheck.coords_per_param".into(), settings.coords_per_param.to_string());
    map.insert("gradcheck.fault_gain".into(), settings.fault_gain.to_string());
    map
}

/// Applies sampling keys (`sample.*`).
pub fn apply_sampling_keys<'a>(
    params: &mut SamplingParams,
    flat: &'a FlatConfig,
) -> Result<ConfigReader<'a>, CliError> {
    let mut reader = ConfigReader::new(flat);
    reader.read("sample.confidence_exponent", &mut params.confidence_exponent)?;
    reader.read("sample.coverage_power", &mut params.coverage_power)?;
    Ok(reader)
}
