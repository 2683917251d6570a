//! Named parameter storage, seed-controlled initialization, and the fixed
//! sinusoidal positional table.

use std::collections::BTreeMap;

use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor};

use super::{EncoderConfig, EncoderError};

/// Flat name → tensor map holding every trainable parameter of the model.
/// Iteration order is the name order, which keeps optimizer sweeps and
/// checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, EncoderError> {
        self.map.get(name).ok_or_else(|| EncoderError::MissingParam(name.to_owned()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Registers every parameter on `tape` and returns the tracked set used
    /// for one forward/backward step.
    pub fn watch_all(&self, tape: &mut Tape) -> ParamSet {
        let map = self.map.iter().map(|(k, v)| (k.clone(), tape.watch(v))).collect();
        ParamSet { map }
    }

    /// Replaces one parameter's values in place (optimizer step).
    pub fn set_data(&mut self, name: &str, data: Vec<f64>) -> Result<(), EncoderError> {
        let old = self.get(name)?;
        assert_eq!(old.len(), data.len(), "parameter {name} length changed");
        let shape = old.shape().to_vec();
        self.map.insert(name.to_owned(), Tensor::from_vec(shape, data));
        Ok(())
    }
}

/// Uniform init on ±1/√fan_in, the fan-in being the contraction dimension.
fn init_weight(rng: &mut SeededRng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform_symmetric(bound)).collect();
    Tensor::from_vec(vec![rows, cols], data)
}

fn zeros_vec(n: usize) -> Tensor {
    Tensor::zeros(vec![n])
}

fn ones_vec(n: usize) -> Tensor {
    Tensor::from_vec(vec![n], vec![1.0; n])
}

/// Adds one transformer encoder stack's parameters under `prefix.`.
fn init_encoder(set: &mut ParamSet, prefix: &str, cfg: &EncoderConfig, rng: &mut SeededRng) {
    let d = cfg.dim;
    set.insert(format!("{prefix}.embed"), init_weight(rng, cfg.vocab, d));
    for layer in 0..cfg.layers {
        let base = format!("{prefix}.l{layer}");
        set.insert(format!("{base}.ln1.gamma"), ones_vec(d));
        set.insert(format!("{base}.ln1.beta"), zeros_vec(d));
        for w in ["wq", "wk", "wv", "wo"] {
            set.insert(format!("{base}.attn.{w}"), init_weight(rng, d, d));
        }
        set.insert(format!("{base}.ln2.gamma"), ones_vec(d));
        set.insert(format!("{base}.ln2.beta"), zeros_vec(d));
        set.insert(format!("{base}.ffn.w1"), init_weight(rng, d, cfg.ff_dim));
        set.insert(format!("{base}.ffn.b1"), zeros_vec(cfg.ff_dim));
        set.insert(format!("{base}.ffn.w2"), init_weight(rng, cfg.ff_dim, d));
        set.insert(format!("{base}.ffn.b2"), zeros_vec(d));
    }
    set.insert(format!("{prefix}.pool.w"), init_weight(rng, d, d));
    set.insert(format!("{prefix}.pool.b"), zeros_vec(d));
}

/// Adds a two-layer head `linear → GELU → layer norm → linear` mapping
/// dimension `d` to `out` logits, under `prefix.`.
fn init_head(set: &mut ParamSet, prefix: &str, d: usize, out: usize, rng: &mut SeededRng) {
    set.insert(format!("{prefix}.w1"), init_weight(rng, d, d));
    set.insert(format!("{prefix}.b1"), zeros_vec(d));
    set.insert(format!("{prefix}.ln.gamma"), ones_vec(d));
    set.insert(format!("{prefix}.ln.beta"), zeros_vec(d));
    set.insert(format!("{prefix}.w2"), init_weight(rng, d, out));
    set.insert(format!("{prefix}.b2"), zeros_vec(out));
}

/// Builds every model parameter: the two encoder stacks, the biotext
/// prototype projection, the cross-attention fusion block, and the two
/// reconstruction heads. Draw order is fixed, so a seed fully determines
/// the initialization.
pub fn init_model_params(
    protein: &EncoderConfig,
    text: &EncoderConfig,
    rng: &mut SeededRng,
) -> Result<ParamSet, EncoderError> {
    protein.validate()?;
    text.validate()?;
    if protein.dim != text.dim {
        return Err(EncoderError::BadConfig(format!(
            "encoder dims differ: protein {} vs text {}",
            protein.dim, text.dim
        )));
    }
    let d = protein.dim;
    let mut set = ParamSet::new();
    init_encoder(&mut set, "protein", protein, rng);
    init_encoder(&mut set, "text", text, rng);
    set.insert("text.proto.w", init_weight(rng, d, d));
    set.insert("text.proto.b", zeros_vec(d));
    for w in ["wq", "wk", "wv", "wo"] {
        set.insert(format!("fuse.{w}"), init_weight(rng, d, d));
    }
    init_head(&mut set, "bsr", d, protein.vocab, rng);
    init_head(&mut set, "mlm", d, protein.vocab, rng);
    Ok(set)
}

/// Fixed sinusoidal positional encodings for `n` positions of width `d`.
pub fn sinusoidal_encoding(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_vec(vec![n, d], data)
}
