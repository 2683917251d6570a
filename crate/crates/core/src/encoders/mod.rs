//! Toy-scale transformer encoders for both modalities, the cross-attention
//! fusion block, and the global property prototype bank.
//!
//! Both encoders are pre-norm transformer stacks over f64 tensors. They are
//! deliberately small — correctness of the training mechanics, not
//! representation quality, is what the rest of the crate verifies — but the
//! wiring (multi-head attention, padding masks, span pooling, residuals) is
//! the real thing.

pub mod checkpoint;
mod params;
mod text;

pub use params::{init_model_params, sinusoidal_encoding, ParamSet};
pub use text::{TextTokenizer, TEXT_PAD};

use std::ops::Range;

use thiserror::Error;

use crate::record::{PAD_TOKEN, PROPERTY_COUNT};
use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor, TensorError};

/// Additive attention-mask value for padded key positions.
const MASK_NEG: f64 = -1e30;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("sequence of {len} tokens exceeds maximum length {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("padding token appears before the end of the sequence")]
    MalformedPadding,
    #[error("property span {start}..{end} outside the {len} biotext tokens")]
    SpanOutOfRange { start: usize, end: usize, len: usize },
    #[error("unknown parameter {0}")]
    MissingParam(String),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Dimensions of one encoder stack.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub vocab: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |msg: String| Err(EncoderError::BadConfig(msg));
        if self.vocab == 0 || self.dim == 0 || self.heads == 0 || self.ff_dim == 0 || self.max_len == 0
        {
            return bad(format!("all dimensions must be >= 1, got {self:?}"));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Default toy stacks: 2 layers, d = 64, 4 heads.
pub fn default_configs() -> (EncoderConfig, EncoderConfig) {
    let protein = EncoderConfig {
        vocab: crate::record::RESIDUE_VOCAB,
        dim: 64,
        layers: 2,
        heads: 4,
        ff_dim: 128,
        max_len: 512,
        dropout: 0.0,
    };
    let text = EncoderConfig { vocab: 1024, max_len: 256, ..protein };
    (protein, text)
}

/// Protein encoder output: per-residue states and the pooled embedding.
#[derive(Debug, Clone)]
pub struct EncodedProtein {
    /// Residue representations, `[n, d]` (rows past `real_len` are padding
    /// artifacts and must not be consumed).
    pub hidden: Tensor,
    /// Pooled sequence embedding, `[d]`: mean over real residues, projected.
    pub pooled: Tensor,
    /// Number of non-padding residues.
    pub real_len: usize,
}

/// Biotext encoder output: token states, pooled embedding, and per-property
/// prototypes (present only where the record carries the property).
#[derive(Debug, Clone)]
pub struct EncodedBiotext {
    pub hidden: Tensor,
    pub pooled: Tensor,
    pub prototypes: [Option<Tensor>; PROPERTY_COUNT],
}

/// Splits a token stream into content and a trailing all-padding tail.
fn split_padding<T: PartialEq + Copy>(tokens: &[T], pad: T) -> Result<usize, EncoderError> {
    let real_len = tokens.iter().position(|&t| t == pad).unwrap_or(tokens.len());
    if real_len == 0 {
        return Err(EncoderError::EmptyInput);
    }
    if tokens[real_len..].iter().any(|&t| t != pad) {
        return Err(EncoderError::MalformedPadding);
    }
    Ok(real_len)
}

/// Inverted dropout; a no-op at probability zero (drawing nothing from the
/// generator, so disabling dropout never shifts the random stream).
fn dropout(
    tape: &mut Tape,
    t: &Tensor,
    p: f64,
    rng: &mut Option<&mut SeededRng>,
) -> Result<Tensor, EncoderError> {
    if p == 0.0 {
        return Ok(t.clone());
    }
    let rng = rng
        .as_deref_mut()
        .ok_or_else(|| EncoderError::BadConfig("dropout requires a generator".to_owned()))?;
    let keep = 1.0 - p;
    let mask: Vec<f64> =
        (0..t.len()).map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 }).collect();
    let mask = Tensor::from_vec(t.shape().to_vec(), mask);
    Ok(tape.mul(t, &mask)?)
}

/// One pre-norm transformer stack over already-embedded inputs.
fn run_stack(
    tape: &mut Tape,
    params: &ParamSet,
    prefix: &str,
    cfg: &EncoderConfig,
    embedded: Tensor,
    real_len: usize,
    rng: &mut Option<&mut SeededRng>,
) -> Result<Tensor, EncoderError> {
    let n = embedded.shape()[0];
    let mask = (real_len < n).then(|| {
        let mut m = vec![0.0; n * n];
        for row in m.chunks_mut(n) {
            for cell in row[real_len..].iter_mut() {
                *cell = MASK_NEG;
            }
        }
        Tensor::from_vec(vec![n, n], m)
    });
    let mut h = embedded;
    for layer in 0..cfg.layers {
        let base = format!("{prefix}.l{layer}");
        let normed = affine_layer_norm(tape, params, &format!("{base}.ln1"), &h)?;
        let attended = self_attention(tape, params, &base, cfg, &normed, mask.as_ref())?;
        let attended = dropout(tape, &attended, cfg.dropout, rng)?;
        h = tape.add(&h, &attended)?;
        let normed = affine_layer_norm(tape, params, &format!("{base}.ln2"), &h)?;
        let ff = feed_forward(tape, params, &base, &normed)?;
        let ff = dropout(tape, &ff, cfg.dropout, rng)?;
        h = tape.add(&h, &ff)?;
    }
    Ok(h)
}

fn affine_layer_norm(
    tape: &mut Tape,
    params: &ParamSet,
    base: &str,
    x: &Tensor,
) -> Result<Tensor, EncoderError> {
    let normed = tape.layer_norm(x)?;
    let scaled = tape.mul_row_vec(&normed, params.get(&format!("{base}.gamma"))?)?;
    Ok(tape.add_row_vec(&scaled, params.get(&format!("{base}.beta"))?)?)
}

fn self_attention(
    tape: &mut Tape,
    params: &ParamSet,
    base: &str,
    cfg: &EncoderConfig,
    x: &Tensor,
    mask: Option<&Tensor>,
) -> Result<Tensor, EncoderError> {
    let q = tape.matmul(x, params.get(&format!("{base}.attn.wq"))?)?;
    let k = tape.matmul(x, params.get(&format!("{base}.attn.wk"))?)?;
    let v = tape.matmul(x, params.get(&format!("{base}.attn.wv"))?)?;
    let dh = cfg.dim / cfg.heads;
    let mut heads = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let (lo, hi) = (head * dh, (head + 1) * dh);
        let qh = tape.slice_cols(&q, lo, hi)?;
        let kh = tape.slice_cols(&k, lo, hi)?;
        let vh = tape.slice_cols(&v, lo, hi)?;
        let kt = tape.transpose(&kh)?;
        let scores = tape.matmul(&qh, &kt)?;
        let mut scores = tape.scale(&scores, 1.0 / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            scores = tape.add(&scores, m)?;
        }
        let attn = tape.softmax_rows(&scores)?;
        heads.push(tape.matmul(&attn, &vh)?);
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    let merged = tape.concat_cols(&refs)?;
    Ok(tape.matmul(&merged, params.get(&format!("{base}.attn.wo"))?)?)
}

fn feed_forward(
    tape: &mut Tape,
    params: &ParamSet,
    base: &str,
    x: &Tensor,
) -> Result<Tensor, EncoderError> {
    let h = tape.matmul(x, params.get(&format!("{base}.ffn.w1"))?)?;
    let h = tape.add_row_vec(&h, params.get(&format!("{base}.ffn.b1"))?)?;
    let h = tape.gelu(&h)?;
    let h = tape.matmul(&h, params.get(&format!("{base}.ffn.w2"))?)?;
    Ok(tape.add_row_vec(&h, params.get(&format!("{base}.ffn.b2"))?)?)
}

/// Mean over the first `real_len` rows, projected through `{prefix}.pool`.
fn pool(
    tape: &mut Tape,
    params: &ParamSet,
    prefix: &str,
    hidden: &Tensor,
    real_len: usize,
) -> Result<Tensor, EncoderError> {
    let d = hidden.shape()[1];
    let content = tape.slice_rows(hidden, 0, real_len)?;
    let mean = tape.mean_of_rows(&content)?;
    let row = tape.reshape(&mean, vec![1, d])?;
    let projected = tape.matmul(&row, params.get(&format!("{prefix}.pool.w"))?)?;
    let projected = tape.add_row_vec(&projected, params.get(&format!("{prefix}.pool.b"))?)?;
    Ok(tape.reshape(&projected, vec![d])?)
}

/// Encodes residue tokens (ids under the residue alphabet; a trailing
/// all-PAD tail is allowed and masked out of attention and pooling).
pub fn encode_protein(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &EncoderConfig,
    tokens: &[u16],
    mut dropout_rng: Option<&mut SeededRng>,
) -> Result<EncodedProtein, EncoderError> {
    if tokens.len() > cfg.max_len {
        return Err(EncoderError::TooLong { len: tokens.len(), max: cfg.max_len });
    }
    let real_len = split_padding(tokens, PAD_TOKEN)?;
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let embedded = tape.embedding_lookup(params.get("protein.embed")?, &ids)?;
    let embedded = tape.add(&embedded, &sinusoidal_encoding(tokens.len(), cfg.dim))?;
    let hidden = run_stack(tape, params, "protein", cfg, embedded, real_len, &mut dropout_rng)?;
    let pooled = pool(tape, params, "protein", &hidden, real_len)?;
    Ok(EncodedProtein { hidden, pooled, real_len })
}

/// Encodes biotext tokens and pools each property span into its prototype.
pub fn encode_biotext(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &EncoderConfig,
    tokens: &[usize],
    spans: &[Option<Range<usize>>; PROPERTY_COUNT],
    mut dropout_rng: Option<&mut SeededRng>,
) -> Result<EncodedBiotext, EncoderError> {
    if tokens.len() > cfg.max_len {
        return Err(EncoderError::TooLong { len: tokens.len(), max: cfg.max_len });
    }
    let real_len = split_padding(tokens, TEXT_PAD)?;
    for span in spans.iter().flatten() {
        if span.start >= span.end || span.end > real_len {
            return Err(EncoderError::SpanOutOfRange {
                start: span.start,
                end: span.end,
                len: real_len,
            });
        }
    }
    let embedded = tape.embedding_lookup(params.get("text.embed")?, tokens)?;
    let embedded = tape.add(&embedded, &sinusoidal_encoding(tokens.len(), cfg.dim))?;
    let hidden = run_stack(tape, params, "text", cfg, embedded, real_len, &mut dropout_rng)?;
    let pooled = pool(tape, params, "text", &hidden, real_len)?;

    let d = cfg.dim;
    let mut prototypes: [Option<Tensor>; PROPERTY_COUNT] = Default::default();
    for (slot, span) in prototypes.iter_mut().zip(spans.iter()) {
        let Some(span) = span else {
            continue;
        };
        let segment = tape.slice_rows(&hidden, span.start, span.end)?;
        let mean = tape.mean_of_rows(&segment)?;
        let row = tape.reshape(&mean, vec![1, d])?;
        let projected = tape.matmul(&row, params.get("text.proto.w")?)?;
        let projected = tape.add_row_vec(&projected, params.get("text.proto.b")?)?;
        *slot = Some(tape.reshape(&projected, vec![d])?);
    }
    Ok(EncodedBiotext { hidden, pooled, prototypes })
}

/// Fuses masked protein states with biotext: residues query the biotext
/// tokens through one cross-attention block, added residually.
pub fn cross_attention_fuse(
    tape: &mut Tape,
    params: &ParamSet,
    protein_hidden: &Tensor,
    text_hidden: &Tensor,
) -> Result<Tensor, EncoderError> {
    let d = protein_hidden.shape().get(1).copied().unwrap_or(0);
    if text_hidden.shape().get(1).copied() != Some(d) {
        return Err(EncoderError::Tensor(TensorError::ShapeMismatch {
            op: "cross_attention_fuse",
            detail: format!("{:?} vs {:?}", protein_hidden.shape(), text_hidden.shape()),
        }));
    }
    let q = tape.matmul(protein_hidden, params.get("fuse.wq")?)?;
    let k = tape.matmul(text_hidden, params.get("fuse.wk")?)?;
    let v = tape.matmul(text_hidden, params.get("fuse.wv")?)?;
    let kt = tape.transpose(&k)?;
    let scores = tape.matmul(&q, &kt)?;
    let scores = tape.scale(&scores, 1.0 / (d as f64).sqrt())?;
    let attn = tape.softmax_rows(&scores)?;
    let mixed = tape.matmul(&attn, &v)?;
    let mixed = tape.matmul(&mixed, params.get("fuse.wo")?)?;
    Ok(tape.add(protein_hidden, &mixed)?)
}

/// Exponentially averaged global prototypes, one unit row per property.
/// Updated between training steps; never differentiated through.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    rows: Vec<Vec<f64>>,
    decay: f64,
}

impl PrototypeBank {
    /// Random unit rows; `decay` is the EMA retention factor in [0, 1].
    pub fn new(dim: usize, decay: f64, rng: &mut SeededRng) -> PrototypeBank {
        let rows = (0..PROPERTY_COUNT)
            .map(|_| {
                let mut row: Vec<f64> = (0..dim).map(|_| rng.uniform_symmetric(1.0)).collect();
                normalize(&mut row);
                row
            })
            .collect();
        PrototypeBank { rows, decay }
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn row(&self, property: usize) -> &[f64] {
        &self.rows[property]
    }

    /// The bank as a constant `[4, d]` tensor.
    pub fn as_tensor(&self) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(PROPERTY_COUNT * d);
        for row in &self.rows {
            data.extend_from_slice(row);
        }
        Tensor::from_vec(vec![PROPERTY_COUNT, d], data)
    }

    /// Folds a batch of per-sample prototypes into the bank:
    /// `row ← normalize(decay · row + (1 − decay) · batch mean)` for every
    /// property with at least one present prototype; others stay untouched.
    pub fn update(&mut self, batch: &[[Option<Vec<f64>>; PROPERTY_COUNT]]) {
        for property in 0..PROPERTY_COUNT {
            let present: Vec<&Vec<f64>> =
                batch.iter().filter_map(|sample| sample[property].as_ref()).collect();
            if present.is_empty() {
                continue;
            }
            let d = self.dim();
            let mut mean = vec![0.0; d];
            for vector in &present {
                for (m, &x) in mean.iter_mut().zip(vector.iter()) {
                    *m += x;
                }
            }
            for m in mean.iter_mut() {
                *m /= present.len() as f64;
            }
            let row = &mut self.rows[property];
            for (r, m) in row.iter_mut().zip(mean.iter()) {
                *r = self.decay * *r + (1.0 - self.decay) * m;
            }
            normalize(row);
        }
    }

    /// Rebuilds a bank from checkpointed rows.
    pub fn from_rows(rows: Vec<Vec<f64>>, decay: f64) -> Result<PrototypeBank, EncoderError> {
        if rows.len() != PROPERTY_COUNT || rows.iter().any(|r| r.len() != rows[0].len()) {
            return Err(EncoderError::BadConfig("prototype bank must be 4 equal rows".to_owned()));
        }
        Ok(PrototypeBank { rows, decay })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Normalizes to unit length; an effectively zero vector is left unchanged
/// (no direction to normalize onto).
fn normalize(row: &mut [f64]) {
    let norm = row.iter().map(|&x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        for x in row.iter_mut() {
            *x /= norm;
        }
    }
}
