//! Batch preparation, the combined training objective, the Adam optimizer,
//! and the resumable training loop driver.
//!
//! A step runs three encoder passes per sample — clean protein (contrastive
//! and property alignment), masked protein (reconstruction and language
//! modeling), and biotext — plus one cross-attention fusion, then combines
//! the four losses and applies one Adam update. Every random choice flows
//! from one seeded generator whose state is checkpointed, so a resumed run
//! reproduces the original trajectory bit for bit.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::checkpoint::{Array, Checkpoint};
use crate::encoders::{
    cross_attention_fuse, default_configs, encode_biotext, encode_protein, init_model_params,
    EncoderConfig, ParamSet, PrototypeBank, TextTokenizer,
};
use crate::record::{tokenize_sequence, ProteinRecord, MASK_TOKEN, PROPERTY_COUNT};
use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor};

use super::{
    bsr_loss, gc_loss, mlm_loss, pda_loss, pda_segments, pda_weights, sample_mlm_positions,
    sample_segments_avoiding, total_loss, LossConfig, LossReport, ObjectiveError, SegmentMaskSet,
};

// ---------------------------------------------------------------------------
// Batch preparation
// ---------------------------------------------------------------------------

/// Matched pooled embeddings: one protein row and one biotext row per record.
pub type PairedEmbeddings = (Vec<Vec<f64>>, Vec<Vec<f64>>);

/// One record with every random masking decision already drawn, so the loss
/// is a pure function of the parameters from here on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedSample {
    /// Original residue tokens (truncated to the encoder maximum).
    pub tokens: Vec<u16>,
    /// Tokens with every masked position replaced by the MASK token.
    pub masked_tokens: Vec<u16>,
    /// Positions masked for language modeling (drawn first).
    pub mlm_positions: Vec<usize>,
    /// Segment mask placed on the positions language modeling left free.
    pub segments: SegmentMaskSet,
    /// Biotext tokens.
    pub text_tokens: Vec<usize>,
    /// Token span of each property's description within the biotext.
    pub spans: [Option<Range<usize>>; PROPERTY_COUNT],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedBatch {
    pub samples: Vec<PreparedSample>,
}

/// Tokenizes and masks a batch. Language-model positions are drawn first;
/// reconstruction segments are then placed on the remaining free positions,
/// so one masked encoder pass serves both objectives.
pub fn prepare_batch(
    records: &[ProteinRecord],
    tokenizer: &TextTokenizer,
    loss: &LossConfig,
    protein: &EncoderConfig,
    text: &EncoderConfig,
    rng: &mut SeededRng,
) -> Result<PreparedBatch, ObjectiveError> {
    let mut samples = Vec::with_capacity(records.len());
    for record in records {
        let mut tokens = tokenize_sequence(record.sequence())?;
        tokens.truncate(protein.max_len);
        let n = tokens.len();
        let mlm_positions = sample_mlm_positions(n, loss.mlm_rate, rng);
        let segments = sample_segments_avoiding(n, rng, &mlm_positions);
        let mut masked_tokens = tokens.clone();
        for &position in &mlm_positions {
            masked_tokens[position] = MASK_TOKEN;
        }
        for position in segments.positions() {
            masked_tokens[position] = MASK_TOKEN;
        }
        let (mut text_tokens, mut spans) = tokenizer.tokenize_record(record);
        if text_tokens.len() > text.max_len {
            text_tokens.truncate(text.max_len);
            for span in spans.iter_mut() {
                *span = span.take().and_then(|s| {
                    if s.start >= text_tokens.len() {
                        None
                    } else {
                        Some(s.start..s.end.min(text_tokens.len()))
                    }
                });
            }
        }
        samples.push(PreparedSample {
            tokens,
            masked_tokens,
            mlm_positions,
            segments,
            text_tokens,
            spans,
        });
    }
    Ok(PreparedBatch { samples })
}

// ---------------------------------------------------------------------------
// Combined batch loss
// ---------------------------------------------------------------------------

/// The combined loss with its per-term scalars and counters.
#[derive(Debug)]
pub struct BatchLoss {
    /// The differentiable combination on the tape.
    pub total: Tensor,
    pub gc: f64,
    pub bsr: f64,
    pub pda: f64,
    pub mlm: f64,
    pub skipped_short: u64,
    pub pda_skipped: u64,
    pub mlm_empty: u64,
    /// Detached per-sample property prototypes, feeding the bank update.
    pub prototype_values: Vec<[Option<Vec<f64>>; PROPERTY_COUNT]>,
}

fn mean_of_terms(
    tape: &mut Tape,
    terms: Vec<Tensor>,
) -> Result<Option<Tensor>, ObjectiveError> {
    let count = terms.len();
    let mut iter = terms.into_iter();
    let Some(first) = iter.next() else {
        return Ok(None);
    };
    let mut acc = first;
    for term in iter {
        acc = tape.add(&acc, &term)?;
    }
    Ok(Some(tape.scale(&acc, 1.0 / count as f64)?))
}

/// Runs the full forward pass for a prepared batch and combines the four
/// losses. When `bank` is given, property alignment uses its rows as fixed
/// prototypes instead of the per-sample ones (presence still follows the
/// record's properties). `params` must be watched on `tape`.
pub fn batch_loss(
    tape: &mut Tape,
    params: &ParamSet,
    protein_cfg: &EncoderConfig,
    text_cfg: &EncoderConfig,
    loss_cfg: &LossConfig,
    batch: &PreparedBatch,
    bank: Option<&PrototypeBank>,
) -> Result<BatchLoss, ObjectiveError> {
    if batch.samples.len() < 2 {
        return Err(ObjectiveError::BatchTooSmall(batch.samples.len()));
    }
    let mut pooled_protein = Vec::new();
    let mut pooled_text = Vec::new();
    let mut bsr_terms = Vec::new();
    let mut mlm_terms = Vec::new();
    let mut pda_terms = Vec::new();
    let mut prototype_values = Vec::new();
    let mut skipped_short = 0u64;
    let mut pda_skipped = 0u64;
    let mut mlm_empty = 0u64;

    for sample in &batch.samples {
        let clean = encode_protein(tape, params, protein_cfg, &sample.tokens, None)?;
        let masked = encode_protein(tape, params, protein_cfg, &sample.masked_tokens, None)?;
        let text =
            encode_biotext(tape, params, text_cfg, &sample.text_tokens, &sample.spans, None)?;
        let fused = cross_attention_fuse(tape, params, &masked.hidden, &text.hidden)?;

        if sample.segments.skipped_short {
            skipped_short += 1;
        }
        if !sample.segments.is_empty() {
            bsr_terms.push(bsr_loss(tape, params, &fused, &sample.tokens, &sample.segments)?);
        }
        if sample.mlm_positions.is_empty() {
            mlm_empty += 1;
        } else {
            mlm_terms.push(mlm_loss(
                tape,
                params,
                &masked.hidden,
                &sample.tokens,
                &sample.mlm_positions,
            )?);
        }

        let prototypes: [Option<Tensor>; PROPERTY_COUNT] = match bank {
            None => text.prototypes.clone(),
            Some(bank) => {
                let mut fixed: [Option<Tensor>; PROPERTY_COUNT] = Default::default();
                for (i, slot) in fixed.iter_mut().enumerate() {
                    if text.prototypes[i].is_some() {
                        let row = bank.row(i).to_vec();
                        *slot = Some(Tensor::from_vec(vec![row.len()], row));
                    }
                }
                fixed
            }
        };
        if prototypes.iter().all(Option::is_none) {
            pda_skipped += 1;
        } else {
            let weights = pda_weights(tape, &prototypes, &clean.hidden, loss_cfg.theta)?;
            match pda_segments(tape, &weights, &clean.hidden)? {
                None => pda_skipped += 1,
                Some(segments) => {
                    match pda_loss(tape, &segments, &prototypes, loss_cfg.tau2)? {
                        None => pda_skipped += 1,
                        Some(term) => pda_terms.push(term),
                    }
                }
            }
        }

        prototype_values.push(std::array::from_fn(|i| {
            text.prototypes[i].as_ref().map(|t| t.data().to_vec())
        }));
        pooled_protein.push(clean.pooled);
        pooled_text.push(text.pooled);
    }

    let protein_rows: Vec<&Tensor> = pooled_protein.iter().collect();
    let text_rows: Vec<&Tensor> = pooled_text.iter().collect();
    let s = tape.stack_rows(&protein_rows)?;
    let t = tape.stack_rows(&text_rows)?;
    let gc = gc_loss(tape, &s, &t, loss_cfg.tau1)?;
    let bsr = mean_of_terms(tape, bsr_terms)?;
    let mlm = mean_of_terms(tape, mlm_terms)?;
    let pda = mean_of_terms(tape, pda_terms)?;
    let total = total_loss(tape, &gc, bsr.as_ref(), mlm.as_ref(), pda.as_ref(), loss_cfg)?;

    let scalar = |t: &Option<Tensor>| -> Result<f64, ObjectiveError> {
        Ok(match t {
            Some(t) => t.item()?,
            None => 0.0,
        })
    };
    Ok(BatchLoss {
        gc: gc.item()?,
        bsr: scalar(&bsr)?,
        pda: scalar(&pda)?,
        mlm: scalar(&mlm)?,
        total,
        skipped_short,
        pda_skipped,
        mlm_empty,
        prototype_values,
    })
}

/// In-batch top-1 retrieval accuracy: for each protein row, the fraction
/// whose highest-cosine biotext row is its own match.
pub fn retrieval_top1(protein: &[Vec<f64>], biotext: &[Vec<f64>]) -> f64 {
    assert_eq!(protein.len(), biotext.len());
    if protein.is_empty() {
        return 0.0;
    }
    let cosine = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na < 1e-15 || nb < 1e-15 {
            0.0
        } else {
            dot / (na * nb)
        }
    };
    let mut hits = 0usize;
    for (i, p) in protein.iter().enumerate() {
        let mut best = 0usize;
        let mut best_value = f64::NEG_INFINITY;
        for (j, t) in biotext.iter().enumerate() {
            let value = cosine(p, t);
            if value > best_value {
                best_value = value;
                best = j;
            }
        }
        if best == i {
            hits += 1;
        }
    }
    hits as f64 / protein.len() as f64
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> AdamConfig {
        AdamConfig { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.lr > 0.0 && self.lr.is_finite())
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0 && self.eps.is_finite())
            || self.weight_decay < 0.0
        {
            return Err(ObjectiveError::BadConfig(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam with bias correction. Moment buffers appear lazily per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Adam {
        Adam { config, first: BTreeMap::new(), second: BTreeMap::new(), steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update over every parameter present in `grads`.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Vec<f64>>,
    ) -> Result<(), ObjectiveError> {
        self.steps += 1;
        let t = self.steps as i32;
        let bias1 = 1.0 - self.config.beta1.powi(t);
        let bias2 = 1.0 - self.config.beta2.powi(t);
        let AdamConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let names: Vec<String> = params.names().map(str::to_owned).collect();
        for name in names {
            let Some(grad) = grads.get(&name) else {
                continue;
            };
            let mut values = params.get(&name)?.data().to_vec();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; values.len()]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; values.len()]);
            for i in 0..values.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                values[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * values[i]);
            }
            params.set_data(&name, values)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub protein: EncoderConfig,
    pub text: EncoderConfig,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub seed: u64,
    pub batch_size: usize,
    /// Use the running prototype bank for alignment targets instead of the
    /// per-sample prototypes.
    pub use_bank_prototypes: bool,
    pub bank_decay: f64,
    /// Permit λ1 + λ2 ≠ 1 (interference experiments only).
    pub allow_unconstrained: bool,
}

impl Default for TrainerConfig {
    fn default() -> TrainerConfig {
        let (protein, text) = default_configs();
        TrainerConfig {
            protein,
            text,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            seed: 42,
            batch_size: 16,
            use_bank_prototypes: false,
            bank_decay: 0.95,
            allow_unconstrained: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        self.protein.validate()?;
        self.text.validate()?;
        if self.allow_unconstrained {
            self.loss.validate_unconstrained()?;
        } else {
            self.loss.validate()?;
        }
        self.adam.validate()?;
        if self.batch_size < 2 {
            return Err(ObjectiveError::BatchTooSmall(self.batch_size));
        }
        if !(0.0..=1.0).contains(&self.bank_decay) {
            return Err(ObjectiveError::BadConfig(format!(
                "bank decay {} outside [0, 1]",
                self.bank_decay
            )));
        }
        Ok(())
    }
}

/// Owns all mutable training state; one instance drives one run.
#[derive(Debug)]
pub struct Trainer {
    config: TrainerConfig,
    params: ParamSet,
    adam: Adam,
    bank: PrototypeBank,
    tokenizer: TextTokenizer,
    rng: SeededRng,
    step: u64,
}

impl Trainer {
    pub fn new(config: TrainerConfig) -> Result<Trainer, ObjectiveError> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed);
        let params = init_model_params(&config.protein, &config.text, &mut rng)?;
        let bank = PrototypeBank::new(config.protein.dim, config.bank_decay, &mut rng);
        let tokenizer = TextTokenizer::new(config.text.vocab)?;
        let adam = Adam::new(config.adam);
        Ok(Trainer { config, params, adam, bank, tokenizer, rng, step: 0 })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn bank(&self) -> &PrototypeBank {
        &self.bank
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn tokenizer(&self) -> &TextTokenizer {
        &self.tokenizer
    }

    /// Runs one optimization step over `records` and reports the losses.
    pub fn train_step(&mut self, records: &[ProteinRecord]) -> Result<LossReport, ObjectiveError> {
        if records.len() < 2 {
            return Err(ObjectiveError::BatchTooSmall(records.len()));
        }
        let prepared = prepare_batch(
            records,
            &self.tokenizer,
            &self.config.loss,
            &self.config.protein,
            &self.config.text,
            &mut self.rng,
        )?;
        let mut tape = Tape::new();
        let watched = self.params.watch_all(&mut tape);
        let bank = self.config.use_bank_prototypes.then_some(&self.bank);
        let losses = batch_loss(
            &mut tape,
            &watched,
            &self.config.protein,
            &self.config.text,
            &self.config.loss,
            &prepared,
            bank,
        )?;
        let degenerate_rows = tape.degenerate_rows();
        let masked_weights = tape.thresholded_entries();
        let total = losses.total.item()?;
        let grads = tape.backward(&losses.total)?;
        let mut by_name = BTreeMap::new();
        for name in self.params.names() {
            by_name.insert(name.to_owned(), grads.wrt(watched.get(name)?));
        }
        self.adam.step(&mut self.params, &by_name)?;
        self.bank.update(&losses.prototype_values);
        self.step += 1;
        Ok(LossReport {
            step: self.step,
            gc: losses.gc,
            bsr: losses.bsr,
            pda: losses.pda,
            mlm: losses.mlm,
            total,
            degenerate_rows,
            skipped_short: losses.skipped_short,
            pda_skipped: losses.pda_skipped,
            mlm_empty: losses.mlm_empty,
            masked_weights,
        })
    }

    /// Forward-only pooled embeddings of matched pairs, for retrieval
    /// evaluation. No masking, no dropout, no parameter tracking.
    pub fn encode_pairs(
        &self,
        records: &[ProteinRecord],
    ) -> Result<PairedEmbeddings, ObjectiveError> {
        let mut protein = Vec::with_capacity(records.len());
        let mut biotext = Vec::with_capacity(records.len());
        for record in records {
            let mut tokens = tokenize_sequence(record.sequence())?;
            tokens.truncate(self.config.protein.max_len);
            let (mut text_tokens, mut spans) = self.tokenizer.tokenize_record(record);
            if text_tokens.len() > self.config.text.max_len {
                text_tokens.truncate(self.config.text.max_len);
                for span in spans.iter_mut() {
                    *span = span.take().and_then(|s| {
                        (s.start < text_tokens.len()).then(|| s.start..s.end.min(text_tokens.len()))
                    });
                }
            }
            let mut tape = Tape::new();
            let encoded =
                encode_protein(&mut tape, &self.params, &self.config.protein, &tokens, None)?;
            let text = encode_biotext(
                &mut tape,
                &self.params,
                &self.config.text,
                &text_tokens,
                &spans,
                None,
            )?;
            protein.push(encoded.pooled.data().to_vec());
            biotext.push(text.pooled.data().to_vec());
        }
        Ok((protein, biotext))
    }

    /// Writes the complete training state; loading reproduces the run
    /// bit for bit.
    pub fn save(&self, path: &Path) -> Result<(), ObjectiveError> {
        let mut ckpt = Checkpoint {
            config_json: serde_json::to_string_pretty(&self.config)
                .map_err(|e| ObjectiveError::BadConfig(format!("config serialization: {e}")))?,
            ..Checkpoint::default()
        };
        ckpt.scalars.insert("step".to_owned(), self.step);
        ckpt.scalars.insert("adam.steps".to_owned(), self.adam.steps);
        for (i, word) in self.rng.state().iter().enumerate() {
            ckpt.scalars.insert(format!("rng.{i}"), *word);
        }
        ckpt.put_params("model", &self.params);
        for (name, values) in &self.adam.first {
            let shape = self.params.get(name)?.shape().to_vec();
            ckpt.arrays
                .insert(format!("adam.m.{name}"), Array { shape, data: values.clone() });
        }
        for (name, values) in &self.adam.second {
            let shape = self.params.get(name)?.shape().to_vec();
            ckpt.arrays
                .insert(format!("adam.v.{name}"), Array { shape, data: values.clone() });
        }
        let d = self.bank.dim();
        let mut rows = Vec::with_capacity(PROPERTY_COUNT * d);
        for row in self.bank.rows() {
            rows.extend_from_slice(row);
        }
        ckpt.arrays.insert(
            "bank.rows".to_owned(),
            Array { shape: vec![PROPERTY_COUNT, d], data: rows },
        );
        ckpt.write_to(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Trainer, ObjectiveError> {
        let ckpt = Checkpoint::read_from(path)?;
        let config: TrainerConfig = serde_json::from_str(&ckpt.config_json)
            .map_err(|e| ObjectiveError::BadConfig(format!("checkpoint config: {e}")))?;
        config.validate()?;
        let params = ckpt.take_params("model")?;
        let mut adam = Adam::new(config.adam);
        adam.steps = ckpt.scalar("adam.steps")?;
        for (name, array) in &ckpt.arrays {
            if let Some(param) = name.strip_prefix("adam.m.") {
                adam.first.insert(param.to_owned(), array.data.clone());
            } else if let Some(param) = name.strip_prefix("adam.v.") {
                adam.second.insert(param.to_owned(), array.data.clone());
            }
        }
        let bank_array = ckpt.array("bank.rows")?;
        let d = bank_array.shape.get(1).copied().unwrap_or(0);
        if bank_array.shape != [PROPERTY_COUNT, d] || d == 0 {
            return Err(ObjectiveError::BadConfig(format!(
                "bank shape {:?} in checkpoint",
                bank_array.shape
            )));
        }
        let rows: Vec<Vec<f64>> = bank_array.data.chunks(d).map(<[f64]>::to_vec).collect();
        let bank = PrototypeBank::from_rows(rows, config.bank_decay)?;
        let state = [
            ckpt.scalar("rng.0")?,
            ckpt.scalar("rng.1")?,
            ckpt.scalar("rng.2")?,
            ckpt.scalar("rng.3")?,
        ];
        let tokenizer = TextTokenizer::new(config.text.vocab)?;
        Ok(Trainer {
            params,
            adam,
            bank,
            tokenizer,
            rng: SeededRng::from_state(state),
            step: ckpt.scalar("step")?,
            config,
        })
    }
}
