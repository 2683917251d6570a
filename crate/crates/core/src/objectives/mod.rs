//! The four pre-training losses and their weighted combination.
//!
//! * **Global contrastive** — symmetric InfoNCE between pooled protein and
//!   pooled biotext embeddings across the batch.
//! * **Static segment reconstruction** — contiguous residue segments are
//!   masked, the masked encoding is fused with the biotext by cross
//!   attention, and a reconstruction head predicts the hidden residues.
//! * **Dynamic segment alignment** — property prototypes attend over the
//!   residues (dot products, min–max normalized, thresholded) to form one
//!   weighted segment embedding per property, pulled toward its own
//!   prototype against the other properties of the same pair.
//! * **Masked language modeling** — independent per-residue masking with a
//!   separate prediction head.
//!
//! Total: `L = L_GC + λ1·L_BSR + λ2·L_MLM + L_PDA` with `λ1 + λ2 = 1`.

mod trainer;

pub use trainer::{
    batch_loss, prepare_batch, retrieval_top1, Adam, AdamConfig, BatchLoss, PairedEmbeddings,
    PreparedBatch, PreparedSample, Trainer, TrainerConfig,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::checkpoint::CheckpointError;
use crate::encoders::EncoderError;
use crate::record::{RecordError, PROPERTY_COUNT};
use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("contrastive batch needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("segment weights must sum to 1: λ1={lambda1} + λ2={lambda2} ≠ 1")]
    WeightConstraintViolation { lambda1: f64, lambda2: f64 },
    #[error("invalid loss configuration: {0}")]
    BadConfig(String),
    #[error("segment mask is empty")]
    EmptyMask,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Loss hyperparameters. `lambda1` weights segment reconstruction,
/// `lambda2` masked language modeling; they must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Temperature of the cross-modal contrastive loss.
    pub tau1: f64,
    /// Temperature of the property-alignment contrastive loss.
    pub tau2: f64,
    /// Sparsification threshold on normalized property–residue weights.
    pub theta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Fraction of residues covered by static segment masks.
    pub segment_mask_rate: f64,
    /// Per-residue masking probability for language modeling.
    pub mlm_rate: f64,
}

impl Default for LossConfig {
    fn default() -> LossConfig {
        LossConfig {
            tau1: 0.07,
            tau2: 0.07,
            theta: 0.3,
            lambda1: 0.7,
            lambda2: 0.3,
            segment_mask_rate: 0.15,
            mlm_rate: 0.15,
        }
    }
}

impl LossConfig {
    /// Full validation, including the λ1 + λ2 = 1 constraint.
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        self.validate_unconstrained()?;
        if (self.lambda1 + self.lambda2 - 1.0).abs() > 1e-9 {
            return Err(ObjectiveError::WeightConstraintViolation {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
            });
        }
        Ok(())
    }

    /// Validation without the weight-sum constraint, for deliberate
    /// unconstrained runs (the interference experiment sets λ1 = λ2 = 1).
    pub fn validate_unconstrained(&self) -> Result<(), ObjectiveError> {
        let bad = |msg: String| Err(ObjectiveError::BadConfig(msg));
        if !(self.tau1 > 0.0 && self.tau1.is_finite()) || !(self.tau2 > 0.0 && self.tau2.is_finite())
        {
            return bad(format!("temperatures must be positive, got {}/{}", self.tau1, self.tau2));
        }
        if !(0.0..1.0).contains(&self.theta) {
            return bad(format!("threshold {} outside [0, 1)", self.theta));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return bad(format!("negative loss weight {}/{}", self.lambda1, self.lambda2));
        }
        for rate in [self.segment_mask_rate, self.mlm_rate] {
            if !(0.0..=1.0).contains(&rate) {
                return bad(format!("mask rate {rate} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Per-step loss values and bookkeeping counters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub gc: f64,
    pub bsr: f64,
    pub pda: f64,
    pub mlm: f64,
    pub total: f64,
    /// Constant weight rows zeroed by min–max normalization.
    pub degenerate_rows: u64,
    /// Sequences too short to carry any segment mask.
    pub skipped_short: u64,
    /// Samples whose property alignment had fewer than two live properties.
    pub pda_skipped: u64,
    /// Samples where the per-residue mask hit no position.
    pub mlm_empty: u64,
    /// Property-weight entries zeroed by the sparsification threshold;
    /// monotone in the threshold for fixed weights.
    pub masked_weights: u64,
}

impl LossReport {
    /// CSV header matching [`LossReport::csv_row`].
    pub const CSV_HEADER: &'static str = "step,gc,bsr,pda,mlm,total,degenerate_rows,skipped_short";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.gc,
            self.bsr,
            self.pda,
            self.mlm,
            self.total,
            self.degenerate_rows,
            self.skipped_short
        )
    }

    /// The weighted combination recomputed exactly as the training step
    /// builds it; the stored total must match to the last bit or two.
    pub fn recombined(&self, config: &LossConfig) -> f64 {
        ((self.gc + config.lambda1 * self.bsr) + config.lambda2 * self.mlm) + self.pda
    }
}

// ---------------------------------------------------------------------------
// Global contrastive loss
// ---------------------------------------------------------------------------

/// Symmetric InfoNCE over pooled embeddings: row `i` of `protein` matches
/// row `i` of `biotext`. Cosine similarities are scaled by `1/tau1`; the
/// loss averages the protein→biotext and biotext→protein directions.
pub fn gc_loss(
    tape: &mut Tape,
    protein: &Tensor,
    biotext: &Tensor,
    tau1: f64,
) -> Result<Tensor, ObjectiveError> {
    let k = protein.shape().first().copied().unwrap_or(0);
    if k < 2 {
        return Err(ObjectiveError::BatchTooSmall(k));
    }
    let sim = tape.cosine_similarity_rows(protein, biotext)?;
    let logits = tape.scale(&sim, 1.0 / tau1)?;
    let diagonal: Vec<usize> = (0..k).collect();
    let forward = tape.cross_entropy_rows(&logits, &diagonal)?;
    let forward = tape.mean_all(&forward)?;
    let transposed = tape.transpose(&logits)?;
    let backward = tape.cross_entropy_rows(&transposed, &diagonal)?;
    let backward = tape.mean_all(&backward)?;
    let sum = tape.add(&forward, &backward)?;
    Ok(tape.scale(&sum, 0.5)?)
}

// ---------------------------------------------------------------------------
// Static segment masks
// ---------------------------------------------------------------------------

/// Non-overlapping masked segments over one sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SegmentMaskSet {
    /// `(start, length)` pairs, sorted by start.
    pub segments: Vec<(usize, usize)>,
    /// Σ lengths.
    pub total_masked: usize,
    /// Sequence was too short to mask at all.
    pub skipped_short: bool,
}

impl SegmentMaskSet {
    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// All masked positions in ascending order.
    pub fn positions(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total_masked);
        for &(start, len) in &self.segments {
            out.extend(start..start + len);
        }
        out.sort_unstable();
        out
    }

    /// Checks the structural invariants against a sequence of length `n`.
    pub fn check_invariants(&self, n: usize) -> Result<(), String> {
        let mut seen = vec![false; n];
        for &(start, len) in &self.segments {
            if len == 0 || start + len > n {
                return Err(format!("segment ({start},{len}) outside 0..{n}"));
            }
            for (position, slot) in seen.iter_mut().enumerate().skip(start).take(len) {
                if *slot {
                    return Err(format!("position {position} covered twice"));
                }
                *slot = true;
            }
        }
        let covered = seen.iter().filter(|&&s| s).count();
        if covered != self.total_masked {
            return Err(format!("total_masked {} but {covered} covered", self.total_masked));
        }
        Ok(())
    }
}

/// Masking budget: 15% of the sequence, rounded half up (exact integer
/// arithmetic: `round(3n/20)`).
pub fn segment_budget(n: usize) -> usize {
    (3 * n + 10) / 20
}

/// Samples non-overlapping masked segments covering 15% of `n` positions.
/// Segment lengths are uniform on {5..10}, clipped to the remaining budget
/// (so one final segment may be shorter than 5); starts are uniform over
/// placements that do not collide. Sequences under 7 residues are skipped.
pub fn sample_static_segments(n: usize, rng: &mut SeededRng) -> SegmentMaskSet {
    sample_segments_avoiding(n, rng, &[])
}

/// Like [`sample_static_segments`] but never placing a segment over the
/// `blocked` positions (already claimed by per-residue masking). Crowding
/// can then leave the budget unreachable; the set stops short in that case.
pub fn sample_segments_avoiding(
    n: usize,
    rng: &mut SeededRng,
    blocked: &[usize],
) -> SegmentMaskSet {
    if n < 7 {
        return SegmentMaskSet { skipped_short: true, ..SegmentMaskSet::default() };
    }
    let budget = segment_budget(n);
    let mut free = vec![true; n];
    for &position in blocked {
        free[position] = false;
    }
    let mut set = SegmentMaskSet::default();
    while set.total_masked < budget {
        let drawn = rng.range_inclusive(5, 10);
        let mut length = drawn.min(budget - set.total_masked);
        let mut starts = admissible_starts(&free, length);
        if starts.is_empty() {
            // No run fits the drawn length; fall back to the longest run.
            let longest = longest_free_run(&free);
            if longest == 0 {
                break;
            }
            length = longest.min(budget - set.total_masked);
            starts = admissible_starts(&free, length);
        }
        let start = starts[rng.index(starts.len())];
        for cell in free[start..start + length].iter_mut() {
            *cell = false;
        }
        set.segments.push((start, length));
        set.total_masked += length;
    }
    set.segments.sort_unstable();
    set
}

fn admissible_starts(free: &[bool], length: usize) -> Vec<usize> {
    let n = free.len();
    if length == 0 || length > n {
        return Vec::new();
    }
    let mut starts = Vec::new();
    let mut run = 0usize;
    for (position, &open) in free.iter().enumerate() {
        run = if open { run + 1 } else { 0 };
        if run >= length {
            starts.push(position + 1 - length);
        }
    }
    starts
}

fn longest_free_run(free: &[bool]) -> usize {
    let mut best = 0;
    let mut run = 0;
    for &open in free {
        run = if open { run + 1 } else { 0 };
        best = best.max(run);
    }
    best
}

// ---------------------------------------------------------------------------
// Reconstruction heads and masked-position cross-entropy
// ---------------------------------------------------------------------------

/// Prediction head shared by both masked objectives:
/// linear → GELU → layer norm → linear to the residue vocabulary.
pub fn reconstruction_head(
    tape: &mut Tape,
    params: &crate::encoders::ParamSet,
    prefix: &str,
    x: &Tensor,
) -> Result<Tensor, ObjectiveError> {
    let h = tape.matmul(x, params.get(&format!("{prefix}.w1"))?)?;
    let h = tape.add_row_vec(&h, params.get(&format!("{prefix}.b1"))?)?;
    let h = tape.gelu(&h)?;
    let h = tape.layer_norm(&h)?;
    let h = tape.mul_row_vec(&h, params.get(&format!("{prefix}.ln.gamma"))?)?;
    let h = tape.add_row_vec(&h, params.get(&format!("{prefix}.ln.beta"))?)?;
    let h = tape.matmul(&h, params.get(&format!("{prefix}.w2"))?)?;
    Ok(tape.add_row_vec(&h, params.get(&format!("{prefix}.b2"))?)?)
}

/// Cross-entropy of head predictions at `positions`, averaged over them.
/// `hidden` is the fused (segment reconstruction) or masked-encoder (MLM)
/// state; `targets` are the original residue tokens.
fn masked_positions_loss(
    tape: &mut Tape,
    params: &crate::encoders::ParamSet,
    head_prefix: &str,
    hidden: &Tensor,
    original_tokens: &[u16],
    positions: &[usize],
) -> Result<Tensor, ObjectiveError> {
    if positions.is_empty() {
        return Err(ObjectiveError::EmptyMask);
    }
    let rows = tape.gather_rows(hidden, positions)?;
    let logits = reconstruction_head(tape, params, head_prefix, &rows)?;
    let targets: Vec<usize> = positions.iter().map(|&p| original_tokens[p] as usize).collect();
    let losses = tape.cross_entropy_rows(&logits, &targets)?;
    Ok(tape.mean_all(&losses)?)
}

/// Segment reconstruction loss: cross-entropy of the reconstruction head
/// over the masked segment positions of one sequence, given the fused
/// protein–biotext states (`fused` is `[n, d]` aligned with the sequence).
pub fn bsr_loss(
    tape: &mut Tape,
    params: &crate::encoders::ParamSet,
    fused: &Tensor,
    original_tokens: &[u16],
    mask: &SegmentMaskSet,
) -> Result<Tensor, ObjectiveError> {
    if mask.is_empty() {
        return Err(ObjectiveError::EmptyMask);
    }
    masked_positions_loss(tape, params, "bsr", fused, original_tokens, &mask.positions())
}

/// Draws the per-residue Bernoulli mask for language modeling.
pub fn sample_mlm_positions(n: usize, rate: f64, rng: &mut SeededRng) -> Vec<usize> {
    if rate == 0.0 {
        return Vec::new();
    }
    (0..n).filter(|_| rng.bernoulli(rate)).collect()
}

/// Masked-language-modeling loss over one sequence: cross-entropy of the
/// MLM head at the masked positions of the masked encoding pass.
pub fn mlm_loss(
    tape: &mut Tape,
    params: &crate::encoders::ParamSet,
    masked_hidden: &Tensor,
    original_tokens: &[u16],
    positions: &[usize],
) -> Result<Tensor, ObjectiveError> {
    masked_positions_loss(tape, params, "mlm", masked_hidden, original_tokens, positions)
}

// ---------------------------------------------------------------------------
// Dynamic property segments
// ---------------------------------------------------------------------------

/// Sparsified property→residue weights for one sample.
#[derive(Debug, Clone)]
pub struct PdaWeights {
    /// Properties that have a prototype, in ascending order.
    pub present: Vec<usize>,
    /// `[present.len(), n]`; entries are 0 or in `[θ, 1]`.
    pub weights: Tensor,
}

/// Aggregated dynamic segment embeddings for one sample.
#[derive(Debug, Clone)]
pub struct PdaSegments {
    /// Properties whose weight row survived sparsification, ascending.
    pub alive: Vec<usize>,
    /// `[alive.len(), d]` normalized weighted sums of residue states.
    pub embeddings: Tensor,
}

/// Computes property–residue weights: dot products of each present
/// prototype with every residue state, min–max normalized per property,
/// then thresholded at `theta` (entries below it become exactly 0).
pub fn pda_weights(
    tape: &mut Tape,
    prototypes: &[Option<Tensor>; PROPERTY_COUNT],
    residues: &Tensor,
    theta: f64,
) -> Result<PdaWeights, ObjectiveError> {
    let present: Vec<usize> =
        (0..PROPERTY_COUNT).filter(|&i| prototypes[i].is_some()).collect();
    if present.is_empty() {
        return Err(ObjectiveError::BadConfig(
            "property weights need at least one prototype".to_owned(),
        ));
    }
    let rows: Vec<&Tensor> = present.iter().map(|&i| prototypes[i].as_ref().unwrap()).collect();
    let a = tape.stack_rows(&rows)?;
    let xt = tape.transpose(residues)?;
    let raw = tape.matmul(&a, &xt)?;
    let normalized = tape.min_max_normalize_rows(&raw)?;
    let weights = tape.threshold_rows(&normalized, theta)?;
    Ok(PdaWeights { present, weights })
}

/// Aggregates residue states under the sparsified weights:
/// `e_i = Σ_j ŵ_ij·x_j / Σ_j ŵ_ij` for every property whose row kept at
/// least one nonzero weight; all-zero rows are dropped.
pub fn pda_segments(
    tape: &mut Tape,
    weights: &PdaWeights,
    residues: &Tensor,
) -> Result<Option<PdaSegments>, ObjectiveError> {
    let n = residues.shape()[0];
    let p = weights.present.len();
    let sums = tape.row_sums(&weights.weights)?;
    let alive_rows: Vec<usize> = (0..p).filter(|&i| sums.data()[i] > 0.0).collect();
    if alive_rows.is_empty() {
        return Ok(None);
    }
    debug_assert_eq!(weights.weights.shape(), &[p, n]);
    let unnormalized = tape.matmul(&weights.weights, residues)?;
    let selected = tape.gather_rows(&unnormalized, &alive_rows)?;
    let sums_col = tape.reshape(&sums, vec![p, 1])?;
    let selected_sums = tape.gather_rows(&sums_col, &alive_rows)?;
    let selected_sums = tape.reshape(&selected_sums, vec![alive_rows.len()])?;
    let embeddings = tape.div_rows_by_col(&selected, &selected_sums)?;
    let alive = alive_rows.iter().map(|&i| weights.present[i]).collect();
    Ok(Some(PdaSegments { alive, embeddings }))
}

/// In-sample property alignment loss. Anchors and negatives both range over
/// the properties that are live on both sides (prototype present and
/// segment embedding alive); needs at least two such properties.
/// Symmetric InfoNCE at temperature `tau2`: segment→prototype and
/// prototype→segment, averaged.
pub fn pda_loss(
    tape: &mut Tape,
    segments: &PdaSegments,
    prototypes: &[Option<Tensor>; PROPERTY_COUNT],
    tau2: f64,
) -> Result<Option<Tensor>, ObjectiveError> {
    let joint: Vec<usize> =
        segments.alive.iter().copied().filter(|&i| prototypes[i].is_some()).collect();
    if joint.len() < 2 {
        return Ok(None);
    }
    // Select the segment rows for the joint set (alive is ascending, so the
    // row index of property `i` is its rank within `alive`).
    let rows: Vec<usize> = joint
        .iter()
        .map(|i| segments.alive.iter().position(|a| a == i).unwrap())
        .collect();
    let e = tape.gather_rows(&segments.embeddings, &rows)?;
    let proto_rows: Vec<&Tensor> =
        joint.iter().map(|&i| prototypes[i].as_ref().unwrap()).collect();
    let a = tape.stack_rows(&proto_rows)?;
    let sim = tape.cosine_similarity_rows(&e, &a)?;
    let logits = tape.scale(&sim, 1.0 / tau2)?;
    let diagonal: Vec<usize> = (0..joint.len()).collect();
    let seg_to_proto = tape.cross_entropy_rows(&logits, &diagonal)?;
    let seg_to_proto = tape.mean_all(&seg_to_proto)?;
    let transposed = tape.transpose(&logits)?;
    let proto_to_seg = tape.cross_entropy_rows(&transposed, &diagonal)?;
    let proto_to_seg = tape.mean_all(&proto_to_seg)?;
    let sum = tape.add(&seg_to_proto, &proto_to_seg)?;
    Ok(Some(tape.scale(&sum, 0.5)?))
}

// ---------------------------------------------------------------------------
// Combination
// ---------------------------------------------------------------------------

/// Combines the four loss terms on the tape:
/// `L = L_GC + λ1·L_BSR + λ2·L_MLM + L_PDA`. Absent terms contribute
/// nothing (and stay out of the gradient). The weight constraint is
/// enforced when the configuration is loaded, not here, so deliberately
/// unconstrained runs can still combine.
pub fn total_loss(
    tape: &mut Tape,
    gc: &Tensor,
    bsr: Option<&Tensor>,
    mlm: Option<&Tensor>,
    pda: Option<&Tensor>,
    config: &LossConfig,
) -> Result<Tensor, ObjectiveError> {
    let mut total = gc.clone();
    if let Some(bsr) = bsr {
        let weighted = tape.scale(bsr, config.lambda1)?;
        total = tape.add(&total, &weighted)?;
    }
    if let Some(mlm) = mlm {
        let weighted = tape.scale(mlm, config.lambda2)?;
        total = tape.add(&total, &weighted)?;
    }
    if let Some(pda) = pda {
        total = tape.add(&total, pda)?;
    }
    Ok(total)
}

pub const VOCAB_UNIFORM_LOSS: f64 = 3.135_494_215_929_149_7; // ln 23

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{init_model_params, EncoderConfig};
    use crate::record::RESIDUE_VOCAB;
    use crate::tensor::testutil::grad_check;

    fn tiny_configs() -> (EncoderConfig, EncoderConfig) {
        let protein = EncoderConfig {
            vocab: RESIDUE_VOCAB,
            dim: 8,
            layers: 1,
            heads: 2,
            ff_dim: 12,
            max_len: 64,
            dropout: 0.0,
        };
        (protein, EncoderConfig { vocab: 64, ..protein })
    }

    fn one_hot_rows(k: usize, d: usize) -> Tensor {
        let mut data = vec![0.0; k * d];
        for i in 0..k {
            data[i * d + i] = 1.0;
        }
        Tensor::from_vec(vec![k, d], data)
    }

    // -- config ------------------------------------------------------------

    #[test]
    fn config_defaults_validate() {
        LossConfig::default().validate().unwrap();
    }

    #[test]
    fn config_rejects_bad_weights() {
        let bad = LossConfig { lambda1: 0.5, lambda2: 0.6, ..LossConfig::default() };
        assert!(matches!(
            bad.validate(),
            Err(ObjectiveError::WeightConstraintViolation { .. })
        ));
        let negative = LossConfig { lambda1: -0.1, lambda2: 1.1, ..LossConfig::default() };
        assert!(matches!(negative.validate(), Err(ObjectiveError::BadConfig(_))));
        let cold = LossConfig { tau1: 0.0, ..LossConfig::default() };
        assert!(cold.validate().is_err());
        let theta = LossConfig { theta: 1.0, ..LossConfig::default() };
        assert!(theta.validate().is_err());
    }

    // -- global contrastive ------------------------------------------------

    #[test]
    fn gc_saturated_pairs_vanish() {
        // Orthonormal matched rows at τ=0.05: the diagonal logit leads every
        // off-diagonal one by 1/τ = 20, so softmax mass ≈ 1 on the match.
        let s = one_hot_rows(4, 8);
        let mut tape = Tape::new();
        let a = tape.watch(&s);
        let b = tape.watch(&s);
        let loss = gc_loss(&mut tape, &a, &b, 0.05).unwrap().item().unwrap();
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn gc_identical_rows_hit_log_k() {
        for k in [2usize, 3, 5] {
            let row: Vec<f64> = (0..6).map(|i| 0.3 + i as f64).collect();
            let mut data = Vec::new();
            for _ in 0..k {
                data.extend_from_slice(&row);
            }
            let t = Tensor::from_vec(vec![k, 6], data);
            let mut tape = Tape::new();
            let a = tape.watch(&t);
            let b = tape.watch(&t);
            let loss = gc_loss(&mut tape, &a, &b, 0.07).unwrap().item().unwrap();
            assert!((loss - (k as f64).ln()).abs() < 1e-12, "k={k} loss={loss}");
        }
    }

    /// Plain-loop InfoNCE: explicit cosines, explicit softmax, both
    /// directions, no shared code with the tape implementation.
    fn loop_info_nce(s: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> f64 {
        let k = s.len();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let mut forward = 0.0;
        let mut backward = 0.0;
        for i in 0..k {
            let mut denom_f = 0.0;
            let mut denom_b = 0.0;
            for j in 0..k {
                denom_f += (cos(&s[i], &t[j]) / tau).exp();
                denom_b += (cos(&s[j], &t[i]) / tau).exp();
            }
            forward += -((cos(&s[i], &t[i]) / tau).exp() / denom_f).ln();
            backward += -((cos(&s[i], &t[i]) / tau).exp() / denom_b).ln();
        }
        (forward / k as f64 + backward / k as f64) / 2.0
    }

    #[test]
    fn gc_matches_loop_oracle() {
        let mut rng = SeededRng::new(31);
        let k = 3;
        let d = 5;
        let s: Vec<Vec<f64>> =
            (0..k).map(|_| (0..d).map(|_| rng.uniform_symmetric(1.0)).collect()).collect();
        let t: Vec<Vec<f64>> =
            (0..k).map(|_| (0..d).map(|_| rng.uniform_symmetric(1.0)).collect()).collect();
        let st = Tensor::from_vec(vec![k, d], s.concat());
        let tt = Tensor::from_vec(vec![k, d], t.concat());
        let mut tape = Tape::new();
        let a = tape.watch(&st);
        let b = tape.watch(&tt);
        let ours = gc_loss(&mut tape, &a, &b, 0.07).unwrap().item().unwrap();
        let oracle = loop_info_nce(&s, &t, 0.07);
        assert!((ours - oracle).abs() < 1e-10, "{ours} vs {oracle}");
    }

    #[test]
    fn gc_invariant_under_matched_permutation_and_scaling() {
        let mut rng = SeededRng::new(37);
        let k = 4;
        let d = 6;
        let s: Vec<Vec<f64>> =
            (0..k).map(|_| (0..d).map(|_| rng.uniform_symmetric(1.0)).collect()).collect();
        let t: Vec<Vec<f64>> =
            (0..k).map(|_| (0..d).map(|_| rng.uniform_symmetric(1.0)).collect()).collect();
        let eval = |s: &[Vec<f64>], t: &[Vec<f64>]| {
            let st = Tensor::from_vec(vec![k, d], s.concat());
            let tt = Tensor::from_vec(vec![k, d], t.concat());
            let mut tape = Tape::new();
            let a = tape.watch(&st);
            let b = tape.watch(&tt);
            gc_loss(&mut tape, &a, &b, 0.07).unwrap().item().unwrap()
        };
        let base = eval(&s, &t);
        // Identical permutation of both sides.
        let order = [2usize, 0, 3, 1];
        let sp: Vec<Vec<f64>> = order.iter().map(|&i| s[i].clone()).collect();
        let tp: Vec<Vec<f64>> = order.iter().map(|&i| t[i].clone()).collect();
        assert!((eval(&sp, &tp) - base).abs() < 1e-12);
        // Positive per-row rescaling (cosine is scale-free).
        let scales = [0.1, 3.0, 7.5, 0.02];
        let ss: Vec<Vec<f64>> = s
            .iter()
            .zip(scales)
            .map(|(row, c)| row.iter().map(|x| x * c).collect())
            .collect();
        assert!((eval(&ss, &t) - base).abs() < 1e-10);
    }

    #[test]
    fn gc_rejects_tiny_batches() {
        let t = Tensor::from_vec(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let mut tape = Tape::new();
        let a = tape.watch(&t);
        let b = tape.watch(&t);
        assert!(matches!(
            gc_loss(&mut tape, &a, &b, 0.07),
            Err(ObjectiveError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn gc_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(41);
        let fixed = Tensor::from_vec(
            vec![3, 5],
            (0..15).map(|_| rng.uniform_symmetric(1.0)).collect(),
        );
        let x0: Vec<f64> = (0..15).map(|_| rng.uniform_symmetric(1.0)).collect();
        grad_check(vec![3, 5], x0, 1e-5, |tape, x| {
            let b = tape.watch(&fixed);
            gc_loss(tape, x, &b, 0.07).unwrap()
        });
    }

    // -- static segments ---------------------------------------------------

    #[test]
    fn budget_is_fifteen_percent_rounded_half_up() {
        assert_eq!(segment_budget(100), 15);
        assert_eq!(segment_budget(40), 6);
        assert_eq!(segment_budget(7), 1);
        assert_eq!(segment_budget(10), 2); // 1.5 rounds up
        assert_eq!(segment_budget(30), 5); // 4.5 rounds up
        for n in 1..=2000 {
            let float = (0.15 * n as f64 + 0.5).floor() as usize;
            assert_eq!(segment_budget(n), float, "n={n}");
        }
    }

    #[test]
    fn short_sequences_skip() {
        let mut rng = SeededRng::new(1);
        for n in 0..7 {
            let set = sample_static_segments(n, &mut rng);
            assert!(set.skipped_short);
            assert!(set.is_empty());
            assert_eq!(set.total_masked, 0);
        }
        assert!(!sample_static_segments(7, &mut rng).skipped_short);
    }

    #[test]
    fn segments_fill_budget_without_overlap() {
        let mut rng = SeededRng::new(17);
        for round in 0..2_000 {
            let n = 20 + (round * 7) % 481; // 20..=500
            let set = sample_static_segments(n, &mut rng);
            set.check_invariants(n).unwrap();
            assert_eq!(set.total_masked, segment_budget(n), "n={n}");
            // Every segment is at most 10 long; only the shortest may dip
            // under 5 (the final clipped remainder).
            let mut lengths: Vec<usize> = set.segments.iter().map(|&(_, l)| l).collect();
            lengths.sort_unstable();
            assert!(lengths.iter().all(|&l| l <= 10), "n={n} lengths {lengths:?}");
            assert!(
                lengths.iter().filter(|&&l| l < 5).count() <= 1,
                "n={n} lengths {lengths:?}"
            );
        }
    }

    #[test]
    fn forty_residue_outcomes_are_six_or_five_plus_one() {
        let mut rng = SeededRng::new(23);
        let mut seen_single = false;
        let mut seen_split = false;
        for _ in 0..500 {
            let set = sample_static_segments(40, &mut rng);
            assert_eq!(set.total_masked, 6);
            let mut lengths: Vec<usize> = set.segments.iter().map(|&(_, l)| l).collect();
            lengths.sort_unstable();
            match lengths.as_slice() {
                [6] => seen_single = true,
                [1, 5] => seen_split = true,
                other => panic!("unreachable outcome {other:?}"),
            }
        }
        assert!(seen_single && seen_split);
    }

    #[test]
    fn blocked_positions_are_never_masked() {
        let mut rng = SeededRng::new(29);
        for _ in 0..200 {
            let n = 60;
            let blocked: Vec<usize> = (0..n).filter(|_| rng.bernoulli(0.2)).collect();
            let set = sample_segments_avoiding(n, &mut rng, &blocked);
            set.check_invariants(n).unwrap();
            for position in set.positions() {
                assert!(!blocked.contains(&position));
            }
        }
    }

    #[test]
    fn fully_blocked_sequence_yields_nothing() {
        let mut rng = SeededRng::new(31);
        let blocked: Vec<usize> = (0..20).collect();
        let set = sample_segments_avoiding(20, &mut rng, &blocked);
        assert!(set.is_empty());
        assert!(!set.skipped_short);
    }

    // -- reconstruction losses ---------------------------------------------

    #[test]
    fn bsr_uniform_logits_cost_log_vocab() {
        let (pc, tc) = tiny_configs();
        let mut params = init_model_params(&pc, &tc, &mut SeededRng::new(5)).unwrap();
        // Zero both head layers: logits collapse to the zero vector, a
        // uniform distribution over the 23-token vocabulary.
        let d = pc.dim;
        params.set_data("bsr.w1", vec![0.0; d * d]).unwrap();
        params.set_data("bsr.b1", vec![0.0; d]).unwrap();
        params.set_data("bsr.w2", vec![0.0; d * RESIDUE_VOCAB]).unwrap();
        params.set_data("bsr.b2", vec![0.0; RESIDUE_VOCAB]).unwrap();
        let fused = Tensor::from_vec(vec![10, d], (0..10 * d).map(|i| (i as f64).sin()).collect());
        let tokens: Vec<u16> = (0..10).map(|i| (i % 20) as u16).collect();
        let mask = SegmentMaskSet {
            segments: vec![(2, 5)],
            total_masked: 5,
            skipped_short: false,
        };
        let mut tape = Tape::new();
        let tracked = params.watch_all(&mut tape);
        let f = tape.watch(&fused);
        let loss = bsr_loss(&mut tape, &tracked, &f, &tokens, &mask).unwrap().item().unwrap();
        assert!((loss - VOCAB_UNIFORM_LOSS).abs() < 1e-12, "loss {loss}");
        assert!((loss - (RESIDUE_VOCAB as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn bsr_one_hot_logits_vanish() {
        let (pc, tc) = tiny_configs();
        let mut params = init_model_params(&pc, &tc, &mut SeededRng::new(7)).unwrap();
        let d = pc.dim;
        // Identity-ish path: zero the first layer so layer norm sees a
        // constant row (output zero), then use the bias of the last layer to
        // plant a 20-margin logit on the true token.
        params.set_data("bsr.w1", vec![0.0; d * d]).unwrap();
        params.set_data("bsr.b1", vec![0.0; d]).unwrap();
        params.set_data("bsr.w2", vec![0.0; d * RESIDUE_VOCAB]).unwrap();
        let tokens: Vec<u16> = vec![4; 9];
        let mut bias = vec![0.0; RESIDUE_VOCAB];
        bias[4] = 20.0;
        params.set_data("bsr.b2", bias).unwrap();
        let fused = Tensor::from_vec(vec![9, d], vec![0.25; 9 * d]);
        let mask = SegmentMaskSet {
            segments: vec![(0, 5)],
            total_masked: 5,
            skipped_short: false,
        };
        let mut tape = Tape::new();
        let tracked = params.watch_all(&mut tape);
        let f = tape.watch(&fused);
        let loss = bsr_loss(&mut tape, &tracked, &f, &tokens, &mask).unwrap().item().unwrap();
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn bsr_matches_loop_oracle_on_masked_positions() {
        let (pc, tc) = tiny_configs();
        let params = init_model_params(&pc, &tc, &mut SeededRng::new(11)).unwrap();
        let d = pc.dim;
        let n = 14;
        let mut rng = SeededRng::new(13);
        let fused =
            Tensor::from_vec(vec![n, d], (0..n * d).map(|_| rng.uniform_symmetric(1.0)).collect());
        let tokens: Vec<u16> = (0..n).map(|_| rng.index(21) as u16).collect();
        let mask = SegmentMaskSet {
            segments: vec![(1, 5), (8, 5)],
            total_masked: 10,
            skipped_short: false,
        };
        let mut tape = Tape::new();
        let tracked = params.watch_all(&mut tape);
        let f = tape.watch(&fused);
        let ours = bsr_loss(&mut tape, &tracked, &f, &tokens, &mask).unwrap().item().unwrap();

        // Loop oracle: run the head by hand on each masked row.
        let get = |name: &str| params.get(name).unwrap().data().to_vec();
        let (w1, b1) = (get("bsr.w1"), get("bsr.b1"));
        let (gamma, beta) = (get("bsr.ln.gamma"), get("bsr.ln.beta"));
        let (w2, b2) = (get("bsr.w2"), get("bsr.b2"));
        let gelu = |x: f64| {
            0.5 * x
                * (1.0
                    + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
        };
        let mut total = 0.0;
        let positions = mask.positions();
        for &p in &positions {
            let row = &fused.data()[p * d..(p + 1) * d];
            let mut h: Vec<f64> = (0..d)
                .map(|j| b1[j] + (0..d).map(|i| row[i] * w1[i * d + j]).sum::<f64>())
                .collect();
            for v in h.iter_mut() {
                *v = gelu(*v);
            }
            let mean = h.iter().sum::<f64>() / d as f64;
            let var = h.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let std = (var + 1e-12).sqrt();
            let normed: Vec<f64> =
                h.iter().enumerate().map(|(j, v)| (v - mean) / std * gamma[j] + beta[j]).collect();
            let logits: Vec<f64> = (0..RESIDUE_VOCAB)
                .map(|k| b2[k] + (0..d).map(|i| normed[i] * w2[i * RESIDUE_VOCAB + k]).sum::<f64>())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            total += -(logits[tokens[p] as usize] - max - z.ln());
        }
        let oracle = total / positions.len() as f64;
        assert!((ours - oracle).abs() < 1e-10, "{ours} vs {oracle}");
    }

    #[test]
    fn bsr_empty_mask_is_an_error() {
        let (pc, tc) = tiny_configs();
        let params = init_model_params(&pc, &tc, &mut SeededRng::new(11)).unwrap();
        let mut tape = Tape::new();
        let tracked = params.watch_all(&mut tape);
        let fused = tape.watch(&Tensor::zeros(vec![5, pc.dim]));
        let empty = SegmentMaskSet::default();
        assert!(matches!(
            bsr_loss(&mut tape, &tracked, &fused, &[0; 5], &empty),
            Err(ObjectiveError::EmptyMask)
        ));
    }

    #[test]
    fn bsr_gradient_matches_finite_differences() {
        let (pc, tc) = tiny_configs();
        let params = init_model_params(&pc, &tc, &mut SeededRng::new(19)).unwrap();
        let d = pc.dim;
        let tokens: Vec<u16> = (0..10).map(|i| (i % 19) as u16).collect();
        let mask = SegmentMaskSet {
            segments: vec![(3, 5)],
            total_masked: 5,
            skipped_short: false,
        };
        let mut rng = SeededRng::new(21);
        let x0: Vec<f64> = (0..10 * d).map(|_| rng.uniform_symmetric(0.8)).collect();
        grad_check(vec![10, d], x0, 1e-4, |tape, x| {
            let tracked = params.watch_all(tape);
            bsr_loss(tape, &tracked, x, &tokens, &mask).unwrap()
        });
    }

    // -- masked language modeling -------------------------------------------

    #[test]
    fn mlm_rate_zero_masks_nothing() {
        let mut rng = SeededRng::new(3);
        let before = rng.clone();
        assert!(sample_mlm_positions(1000, 0.0, &mut rng).is_empty());
        // Rate zero must not consume randomness either.
        assert_eq!(rng, before);
    }

    #[test]
    fn mlm_masked_fraction_concentrates_at_rate() {
        let mut rng = SeededRng::new(47);
        let mut masked = 0usize;
        let trials = 100;
        let n = 1000;
        for _ in 0..trials {
            masked += sample_mlm_positions(n, 0.15, &mut rng).len();
        }
        let fraction = masked as f64 / (trials * n) as f64;
        assert!((fraction - 0.15).abs() < 0.005, "fraction {fraction}");
    }

    #[test]
    fn mlm_uniform_logits_cost_log_vocab() {
        let (pc, tc) = tiny_configs();
        let mut params = init_model_params(&pc, &tc, &mut SeededRng::new(5)).unwrap();
        let d = pc.dim;
        params.set_data("mlm.w1", vec![0.0; d * d]).unwrap();
        params.set_data("mlm.b1", vec![0.0; d]).unwrap();
        params.set_data("mlm.w2", vec![0.0; d * RESIDUE_VOCAB]).unwrap();
        params.set_data("mlm.b2", vec![0.0; RESIDUE_VOCAB]).unwrap();
        let hidden = Tensor::from_vec(vec![8, d], (0..8 * d).map(|i| (i as f64).cos()).collect());
        let tokens: Vec<u16> = (0..8).map(|i| (i % 15) as u16).collect();
        let mut tape = Tape::new();
        let tracked = params.watch_all(&mut tape);
        let h = tape.watch(&hidden);
        let loss =
            mlm_loss(&mut tape, &tracked, &h, &tokens, &[1, 4, 6]).unwrap().item().unwrap();
        assert!((loss - (RESIDUE_VOCAB as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn mlm_no_positions_is_empty_mask() {
        let (pc, tc) = tiny_configs();
        let params = init_model_params(&pc, &tc, &mut SeededRng::new(5)).unwrap();
        let mut tape = Tape::new();
        let tracked = params.watch_all(&mut tape);
        let h = tape.watch(&Tensor::zeros(vec![4, pc.dim]));
        assert!(matches!(
            mlm_loss(&mut tape, &tracked, &h, &[0; 4], &[]),
            Err(ObjectiveError::EmptyMask)
        ));
    }

    // -- dynamic property segments ------------------------------------------

    fn proto(v: Vec<f64>) -> Option<Tensor> {
        Some(Tensor::from_vec(vec![v.len()], v))
    }

    #[test]
    fn weight_rows_are_normalized_then_thresholded() {
        // Raw dot products [2, 4, 6] → min-max [0, 0.5, 1] → θ=0.3 keeps
        // the upper two entries, zeroes the minimum.
        let prototypes: [Option<Tensor>; 4] =
            [proto(vec![2.0, 0.0]), None, None, None];
        let residues = Tensor::from_vec(vec![3, 2], vec![1.0, 9.0, 2.0, 9.0, 3.0, 9.0]);
        let mut tape = Tape::new();
        let x = tape.watch(&residues);
        let w = pda_weights(&mut tape, &prototypes, &x, 0.3).unwrap();
        assert_eq!(w.present, vec![0]);
        assert_eq!(w.weights.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn constant_weight_row_goes_dead_and_counts() {
        let prototypes: [Option<Tensor>; 4] = [proto(vec![0.0, 1.0]), None, None, None];
        // Identical second column → every dot product equal → degenerate.
        let residues = Tensor::from_vec(vec![3, 2], vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let mut tape = Tape::new();
        let x = tape.watch(&residues);
        let w = pda_weights(&mut tape, &prototypes, &x, 0.3).unwrap();
        assert_eq!(w.weights.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(tape.degenerate_rows(), 1);
        let segments = pda_segments(&mut tape, &w, &x).unwrap();
        assert!(segments.is_none(), "all-zero row cannot aggregate");
    }

    #[test]
    fn weights_match_loop_oracle() {
        let mut rng = SeededRng::new(53);
        let d = 5;
        let n = 7;
        let theta = 0.3;
        let p0: Vec<f64> = (0..d).map(|_| rng.uniform_symmetric(1.0)).collect();
        let p2: Vec<f64> = (0..d).map(|_| rng.uniform_symmetric(1.0)).collect();
        let residues: Vec<f64> = (0..n * d).map(|_| rng.uniform_symmetric(1.0)).collect();
        let prototypes: [Option<Tensor>; 4] =
            [proto(p0.clone()), None, proto(p2.clone()), None];
        let x = Tensor::from_vec(vec![n, d], residues.clone());
        let mut tape = Tape::new();
        let xt = tape.watch(&x);
        let w = pda_weights(&mut tape, &prototypes, &xt, theta).unwrap();
        assert_eq!(w.present, vec![0, 2]);

        for (row, a) in [(0usize, &p0), (1, &p2)] {
            let raw: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|i| a[i] * residues[j * d + i]).sum::<f64>())
                .collect();
            let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (j, &r) in raw.iter().enumerate() {
                let normalized = if hi > lo { (r - lo) / (hi - lo) } else { 0.0 };
                let expect = if normalized >= theta { normalized } else { 0.0 };
                let got = w.weights.data()[row * n + j];
                assert_eq!(got, expect, "row {row} column {j}");
            }
        }
    }

    #[test]
    fn weight_support_shrinks_as_theta_grows() {
        let mut rng = SeededRng::new(59);
        let d = 4;
        let n = 12;
        let prototypes: [Option<Tensor>; 4] =
            [proto((0..d).map(|_| rng.uniform_symmetric(1.0)).collect()), None, None, None];
        let x = Tensor::from_vec(
            vec![n, d],
            (0..n * d).map(|_| rng.uniform_symmetric(1.0)).collect(),
        );
        let mut previous = usize::MAX;
        for theta in [0.0, 0.2, 0.4, 0.6, 0.8] {
            let mut tape = Tape::new();
            let xt = tape.watch(&x);
            let w = pda_weights(&mut tape, &prototypes, &xt, theta).unwrap();
            let survivors = w.weights.data().iter().filter(|&&v| v != 0.0).count();
            for &v in w.weights.data() {
                assert!(v == 0.0 || (theta..=1.0).contains(&v));
            }
            assert!(survivors <= previous, "support grew at θ={theta}");
            previous = survivors;
        }
    }

    #[test]
    fn single_surviving_weight_copies_the_residue() {
        // One row whose maximum sits at position 3; θ high enough that only
        // the maximum (normalized to exactly 1) survives.
        let prototypes: [Option<Tensor>; 4] = [proto(vec![1.0, 0.0]), None, None, None];
        let residues = Tensor::from_vec(
            vec![5, 2],
            vec![0.1, 7.0, 0.2, 7.0, 0.3, 7.0, 5.0, 7.0, 0.15, 7.0],
        );
        let mut tape = Tape::new();
        let x = tape.watch(&residues);
        let w = pda_weights(&mut tape, &prototypes, &x, 0.99).unwrap();
        let segments = pda_segments(&mut tape, &w, &x).unwrap().unwrap();
        assert_eq!(segments.alive, vec![0]);
        assert_eq!(segments.embeddings.data(), &[5.0, 7.0]);
    }

    #[test]
    fn segments_match_loop_oracle() {
        let mut rng = SeededRng::new(61);
        let d = 4;
        let n = 9;
        let theta = 0.25;
        let prototypes: [Option<Tensor>; 4] = [
            proto((0..d).map(|_| rng.uniform_symmetric(1.0)).collect()),
            proto((0..d).map(|_| rng.uniform_symmetric(1.0)).collect()),
            None,
            proto((0..d).map(|_| rng.uniform_symmetric(1.0)).collect()),
        ];
        let residues: Vec<f64> = (0..n * d).map(|_| rng.uniform_symmetric(1.0)).collect();
        let x = Tensor::from_vec(vec![n, d], residues.clone());
        let mut tape = Tape::new();
        let xt = tape.watch(&x);
        let w = pda_weights(&mut tape, &prototypes, &xt, theta).unwrap();
        let segments = pda_segments(&mut tape, &w, &xt).unwrap().unwrap();

        let n_alive = segments.alive.len();
        for (rank, &property) in segments.alive.iter().enumerate() {
            let row_in_present = w.present.iter().position(|&p| p == property).unwrap();
            let weights_row = &w.weights.data()[row_in_present * n..(row_in_present + 1) * n];
            let wsum: f64 = weights_row.iter().sum();
            assert!(wsum > 0.0);
            for j in 0..d {
                let expect: f64 = (0..n)
                    .map(|r| weights_row[r] * residues[r * d + j])
                    .sum::<f64>()
                    / wsum;
                let got = segments.embeddings.data()[rank * d + j];
                assert!((got - expect).abs() < 1e-12, "property {property} dim {j}");
            }
        }
        assert!(n_alive >= 2, "random case should keep most rows");
    }

    #[test]
    fn pda_saturated_orthonormal_pairs_vanish() {
        // Segment embeddings equal to their own orthonormal prototypes: at a
        // cold temperature each anchor's match dominates every negative.
        let prototypes: [Option<Tensor>; 4] = [
            proto(vec![1.0, 0.0, 0.0, 0.0]),
            proto(vec![0.0, 1.0, 0.0, 0.0]),
            None,
            None,
        ];
        let mut tape = Tape::new();
        let e = tape.watch(&one_hot_rows(2, 4));
        let segments = PdaSegments { alive: vec![0, 1], embeddings: e };
        let loss =
            pda_loss(&mut tape, &segments, &prototypes, 0.01).unwrap().unwrap().item().unwrap();
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn pda_identical_embeddings_hit_log_property_count() {
        // All four properties share one direction on both sides: softmax is
        // uniform over 4 candidates in both normalizations.
        let row = vec![0.5, -0.2, 0.9, 0.1];
        let all = Tensor::from_vec(vec![4, 4], row.repeat(4));
        let prototypes: [Option<Tensor>; 4] = [
            proto(row.clone()),
            proto(row.clone()),
            proto(row.clone()),
            proto(row.clone()),
        ];
        let mut tape = Tape::new();
        let e = tape.watch(&all);
        let segments = PdaSegments { alive: vec![0, 1, 2, 3], embeddings: e };
        let loss =
            pda_loss(&mut tape, &segments, &prototypes, 0.07).unwrap().unwrap().item().unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn pda_matches_loop_oracle() {
        let mut rng = SeededRng::new(67);
        let d = 5;
        let tau = 0.07;
        let e_rows: Vec<Vec<f64>> =
            (0..3).map(|_| (0..d).map(|_| rng.uniform_symmetric(1.0)).collect()).collect();
        let a_rows: Vec<Vec<f64>> =
            (0..3).map(|_| (0..d).map(|_| rng.uniform_symmetric(1.0)).collect()).collect();
        let prototypes: [Option<Tensor>; 4] = [
            proto(a_rows[0].clone()),
            proto(a_rows[1].clone()),
            proto(a_rows[2].clone()),
            None,
        ];
        let mut tape = Tape::new();
        let e = tape.watch(&Tensor::from_vec(vec![3, d], e_rows.concat()));
        let segments = PdaSegments { alive: vec![0, 1, 2], embeddings: e };
        let ours =
            pda_loss(&mut tape, &segments, &prototypes, tau).unwrap().unwrap().item().unwrap();
        let oracle = loop_info_nce(&e_rows, &a_rows, tau);
        assert!((ours - oracle).abs() < 1e-10, "{ours} vs {oracle}");
    }

    #[test]
    fn pda_requires_two_joint_properties() {
        let prototypes: [Option<Tensor>; 4] =
            [proto(vec![1.0, 0.0]), None, None, None];
        let mut tape = Tape::new();
        let e = tape.watch(&Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]));
        let segments = PdaSegments { alive: vec![0], embeddings: e };
        assert!(pda_loss(&mut tape, &segments, &prototypes, 0.07).unwrap().is_none());
        // Segment alive for a property whose prototype is gone: not joint.
        let prototypes2: [Option<Tensor>; 4] =
            [proto(vec![1.0, 0.0]), None, None, None];
        let mut tape2 = Tape::new();
        let e2 = tape2.watch(&Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let segments2 = PdaSegments { alive: vec![0, 1], embeddings: e2 };
        assert!(pda_loss(&mut tape2, &segments2, &prototypes2, 0.07).unwrap().is_none());
    }

    #[test]
    fn pda_scale_invariance() {
        let mut rng = SeededRng::new(71);
        let d = 4;
        let rows: Vec<Vec<f64>> =
            (0..3).map(|_| (0..d).map(|_| rng.uniform_symmetric(1.0)).collect()).collect();
        let protos: Vec<Vec<f64>> =
            (0..3).map(|_| (0..d).map(|_| rng.uniform_symmetric(1.0)).collect()).collect();
        let eval = |scale: f64| {
            let scaled: Vec<f64> =
                rows.concat().iter().map(|x| x * scale).collect();
            let prototypes: [Option<Tensor>; 4] = [
                proto(protos[0].clone()),
                proto(protos[1].clone()),
                proto(protos[2].clone()),
                None,
            ];
            let mut tape = Tape::new();
            let e = tape.watch(&Tensor::from_vec(vec![3, d], scaled));
            let segments = PdaSegments { alive: vec![0, 1, 2], embeddings: e };
            pda_loss(&mut tape, &segments, &prototypes, 0.07).unwrap().unwrap().item().unwrap()
        };
        assert!((eval(1.0) - eval(37.5)).abs() < 1e-10);
    }

    #[test]
    fn pda_gradient_through_weights_and_segments() {
        // End-to-end: residues → weights → segments → loss, checked against
        // finite differences. Threshold zero keeps the surface smooth except
        // at min/max ties, which this fixed input avoids.
        let mut rng = SeededRng::new(73);
        let d = 4;
        let n = 6;
        let protos: [Option<Tensor>; 4] = [
            proto((0..d).map(|_| rng.uniform_symmetric(1.0)).collect()),
            proto((0..d).map(|_| rng.uniform_symmetric(1.0)).collect()),
            None,
            None,
        ];
        let x0: Vec<f64> = (0..n * d).map(|_| rng.uniform_symmetric(1.0)).collect();
        grad_check(vec![n, d], x0, 1e-4, |tape, x| {
            let w = pda_weights(tape, &protos, x, 0.0).unwrap();
            let segments = pda_segments(tape, &w, x).unwrap().unwrap();
            pda_loss(tape, &segments, &protos, 0.07).unwrap().unwrap()
        });
    }

    // -- combination ---------------------------------------------------------

    #[test]
    fn total_combines_with_stated_weights() {
        let config = LossConfig::default();
        let mut tape = Tape::new();
        let gc = tape.watch(&Tensor::scalar(1.0));
        let bsr = tape.watch(&Tensor::scalar(2.0));
        let mlm = tape.watch(&Tensor::scalar(3.0));
        let pda = tape.watch(&Tensor::scalar(4.0));
        let total = total_loss(&mut tape, &gc, Some(&bsr), Some(&mlm), Some(&pda), &config)
            .unwrap()
            .item()
            .unwrap();
        assert!((total - 7.3).abs() < 1e-12, "total {total}");
    }

    #[test]
    fn lambda_one_erases_mlm() {
        let config = LossConfig { lambda1: 1.0, lambda2: 0.0, ..LossConfig::default() };
        let mut tape = Tape::new();
        let gc = tape.watch(&Tensor::scalar(1.0));
        let bsr = tape.watch(&Tensor::scalar(2.0));
        let mlm = tape.watch(&Tensor::scalar(100.0));
        let total =
            total_loss(&mut tape, &gc, Some(&bsr), Some(&mlm), None, &config).unwrap();
        assert!((total.item().unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn unconstrained_validation_permits_equal_weights() {
        // λ1 = λ2 = 1 fails the strict check but passes the relaxed one
        // (the interference experiment runs exactly this setting).
        let both = LossConfig { lambda1: 1.0, lambda2: 1.0, ..LossConfig::default() };
        assert!(matches!(
            both.validate(),
            Err(ObjectiveError::WeightConstraintViolation { .. })
        ));
        both.validate_unconstrained().unwrap();
        // Still not a free-for-all: negative weights stay rejected.
        let negative = LossConfig { lambda1: -1.0, ..both };
        assert!(negative.validate_unconstrained().is_err());
    }

    #[test]
    fn bsr_contribution_is_linear() {
        let config = LossConfig::default();
        let eval = |bsr_value: f64| {
            let mut tape = Tape::new();
            let gc = tape.watch(&Tensor::scalar(1.0));
            let bsr = tape.watch(&Tensor::scalar(bsr_value));
            total_loss(&mut tape, &gc, Some(&bsr), None, None, &config)
                .unwrap()
                .item()
                .unwrap()
        };
        let single = eval(2.0) - eval(0.0);
        let double = eval(4.0) - eval(0.0);
        assert_eq!(double, 2.0 * single);
    }

    #[test]
    fn missing_terms_contribute_nothing() {
        let config = LossConfig::default();
        let mut tape = Tape::new();
        let gc = tape.watch(&Tensor::scalar(1.5));
        let total = total_loss(&mut tape, &gc, None, None, None, &config).unwrap();
        assert_eq!(total.item().unwrap(), 1.5);
    }

    #[test]
    fn report_recombination_identity() {
        let config = LossConfig::default();
        let report = LossReport {
            step: 3,
            gc: 1.25,
            bsr: 2.5,
            pda: 0.75,
            mlm: 3.125,
            total: ((1.25 + 0.7 * 2.5) + 0.3 * 3.125) + 0.75,
            ..LossReport::default()
        };
        assert!((report.total - report.recombined(&config)).abs() < 1e-12);
        assert_eq!(
            report.csv_row().split(',').count(),
            LossReport::CSV_HEADER.split(',').count()
        );
    }
}
