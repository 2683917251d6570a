//! Finite-difference verification of every training loss.
//!
//! Each check builds a micro model, computes analytic gradients by reverse
//! accumulation, and compares them against central finite differences on a
//! deterministic sample of coordinates from every parameter tensor.
//!
//! The losses are piecewise-smooth: min–max normalization selects row
//! extrema, and sparsification zeroes weights below the threshold. A finite
//! difference straddling such a boundary disagrees with the (one-sided)
//! analytic derivative no matter how correct the backward pass is, so
//! scenario generation screens the geometry — extrema must be uniquely
//! attained and no normalized weight may sit within a safety margin of the
//! threshold — and re-draws deterministically until every loss is smooth
//! around the operating point.

use serde::Serialize;

use crate::encoders::{
    cross_attention_fuse, encode_biotext, encode_protein, init_model_params, EncoderConfig,
    ParamSet, TextTokenizer,
};
use crate::objectives::{
    batch_loss, bsr_loss, gc_loss, mlm_loss, pda_loss, pda_segments, pda_weights, prepare_batch,
    LossConfig, ObjectiveError, PreparedBatch,
};
use crate::record::{ProteinRecord, AMINO_ACIDS, RESIDUE_VOCAB};
use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor};

/// The five checked losses, in report order.
pub const LOSS_NAMES: [&str; 5] = ["gc", "bsr", "pda", "mlm", "total"];

/// No normalized weight may sit closer than this to the sparsification
/// threshold, and row extrema must be separated from the runner-up by at
/// least this much; both keep a ±`step` probe on one smooth piece.
const GEOMETRY_MARGIN: f64 = 1e-3;

/// How the checks are run. The defaults match the micro-shape contract:
/// 8-dimensional embeddings, 16-residue sequences, 3 records per batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CheckSettings {
    pub dim: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub layers: usize,
    /// Maximum admissible relative error.
    pub tolerance: f64,
    /// Central-difference step.
    pub step: f64,
    /// Coordinates probed per parameter tensor.
    pub coords_per_param: usize,
    /// Verification hook forwarded to the tape: values other than 1.0
    /// deliberately corrupt one backward rule so the harness can prove it
    /// catches a broken gradient.
    pub fault_gain: f64,
}

impl Default for CheckSettings {
    fn default() -> CheckSettings {
        CheckSettings {
            dim: 8,
            seq_len: 16,
            batch: 3,
            layers: 1,
            tolerance: 1e-4,
            step: 1e-5,
            coords_per_param: 2,
            fault_gain: 1.0,
        }
    }
}

/// Worst disagreement found within one parameter tensor.
#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    /// Flat index of the worst coordinate.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

/// Verdict for one loss: every parameter's worst error, plus the overall one.
#[derive(Debug, Clone, Serialize)]
pub struct LossCheck {
    pub loss: String,
    pub params: Vec<ParamCheck>,
    pub worst_error: f64,
    pub coords_checked: usize,
    pub passed: bool,
}

impl LossCheck {
    /// The parameter holding the overall worst coordinate.
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub seed: u64,
    pub settings: CheckSettings,
    pub losses: Vec<LossCheck>,
    pub all_passed: bool,
}

impl CheckReport {
    /// Human-readable report: one verdict line per loss, then the
    /// per-parameter worst errors.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "gradient check: seed {}, tolerance {:.1e}, step {:.1e}\n",
            self.seed, self.settings.tolerance, self.settings.step
        ));
        for check in &self.losses {
            let verdict = if check.passed { "PASS" } else { "FAIL" };
            let at = check
                .worst()
                .map(|w| format!(" at {}[{}]", w.name, w.index))
                .unwrap_or_default();
            out.push_str(&format!(
                "[{verdict}] {}: worst relative error {:.3e}{} ({} coordinates)\n",
                check.loss, check.worst_error, at, check.coords_checked
            ));
            for param in &check.params {
                out.push_str(&format!(
                    "    {}: {:.3e}\n",
                    param.name, param.relative_error
                ));
            }
        }
        out.push_str(if self.all_passed { "all losses PASS\n" } else { "FAILURES present\n" });
        out
    }
}

/// One frozen micro-model and batch that every loss is checked against.
struct Scenario {
    protein: EncoderConfig,
    text: EncoderConfig,
    loss: LossConfig,
    params: ParamSet,
    prepared: PreparedBatch,
}

fn scenario_records(rng: &mut SeededRng, count: usize, len: usize) -> Vec<ProteinRecord> {
    (0..count)
        .map(|i| {
            let sequence: String = (0..len).map(|_| AMINO_ACIDS[rng.index(20)] as char).collect();
            let salt = rng.next_u64() % 1000;
            ProteinRecord::new(
                format!("CHK{i}"),
                &sequence,
                [
                    Some(format!("Probe protein {salt}")),
                    Some(format!("Performs probe reaction {salt} on residue substrates.")),
                    Some("Cytoplasm.".to_owned()),
                    None,
                ],
                1,
                true,
            )
            .expect("synthetic record is valid")
        })
        .collect()
}

/// True when every min–max row has uniquely attained extrema and every
/// normalized weight clears the threshold margin, for every sample — i.e.
/// the PDA pipeline is differentiable in a `±step` box around the current
/// parameters — and the pipeline actually yields a loss for every sample.
fn pda_geometry_ok(scenario: &Scenario) -> Result<bool, ObjectiveError> {
    let params = &scenario.params;
    for sample in &scenario.prepared.samples {
        let mut tape = Tape::new();
        let clean = encode_protein(&mut tape, params, &scenario.protein, &sample.tokens, None)?;
        let text = encode_biotext(
            &mut tape,
            params,
            &scenario.text,
            &sample.text_tokens,
            &sample.spans,
            None,
        )?;
        let n = sample.tokens.len();
        let d = scenario.protein.dim;
        let hidden = clean.hidden.data();
        for prototype in text.prototypes.iter().flatten() {
            let a = prototype.data();
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|i| a[i] * hidden[j * d + i]).sum())
                .collect();
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            let (low, high) = (sorted[0], sorted[n - 1]);
            if high - low < 1e-4
                || sorted[1] - low < GEOMETRY_MARGIN
                || high - sorted[n - 2] < GEOMETRY_MARGIN
            {
                return Ok(false);
            }
            if scores
                .iter()
                .any(|&s| ((s - low) / (high - low) - scenario.loss.theta).abs() < GEOMETRY_MARGIN)
            {
                return Ok(false);
            }
        }
        let weights =
            pda_weights(&mut tape, &text.prototypes, &clean.hidden, scenario.loss.theta)?;
        let Some(segments) = pda_segments(&mut tape, &weights, &clean.hidden)? else {
            return Ok(false);
        };
        if pda_loss(&mut tape, &segments, &text.prototypes, scenario.loss.tau2)?.is_none() {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Draws scenarios until one is smooth for every loss: all samples carry
/// language-model positions and reconstruction segments, and the alignment
/// geometry clears its margins. Deterministic in `seed`.
fn build_scenario(seed: u64, settings: &CheckSettings) -> Result<Scenario, ObjectiveError> {
    let protein = EncoderConfig {
        vocab: RESIDUE_VOCAB,
        dim: settings.dim,
        layers: settings.layers,
        heads: 2,
        ff_dim: 2 * settings.dim,
        max_len: settings.seq_len.max(8) * 2,
        dropout: 0.0,
    };
    let text = EncoderConfig { vocab: 256, max_len: 96, ..protein };
    let loss = LossConfig::default();
    let tokenizer = TextTokenizer::new(text.vocab)?;
    for attempt in 0..64u64 {
        let mut rng =
            SeededRng::new(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(attempt));
        let params = init_model_params(&protein, &text, &mut rng)?;
        let records = scenario_records(&mut rng, settings.batch, settings.seq_len);
        let prepared = prepare_batch(&records, &tokenizer, &loss, &protein, &text, &mut rng)?;
        let masks_ok = prepared
            .samples
            .iter()
            .all(|s| !s.mlm_positions.is_empty() && !s.segments.is_empty());
        if !masks_ok {
            continue;
        }
        let scenario = Scenario { protein, text, loss, params, prepared };
        if pda_geometry_ok(&scenario)? {
            return Ok(scenario);
        }
    }
    Err(ObjectiveError::BadConfig(format!(
        "no smooth gradient-check scenario found for seed {seed}"
    )))
}

fn mean_of(tape: &mut Tape, terms: Vec<Tensor>) -> Result<Tensor, ObjectiveError> {
    let count = terms.len();
    let mut iter = terms.into_iter();
    let mut acc = iter.next().ok_or(ObjectiveError::EmptyMask)?;
    for term in iter {
        acc = tape.add(&acc, &term)?;
    }
    Ok(tape.scale(&acc, 1.0 / count as f64)?)
}

/// Builds the named loss on `tape` from `params`. Scenario generation
/// guarantees every sample contributes to every loss.
fn build_loss(
    name: &str,
    tape: &mut Tape,
    params: &ParamSet,
    sc: &Scenario,
) -> Result<Tensor, ObjectiveError> {
    match name {
        "total" => {
            Ok(batch_loss(tape, params, &sc.protein, &sc.text, &sc.loss, &sc.prepared, None)?
                .total)
        }
        "gc" => {
            let mut protein_rows = Vec::new();
            let mut text_rows = Vec::new();
            for sample in &sc.prepared.samples {
                let clean = encode_protein(tape, params, &sc.protein, &sample.tokens, None)?;
                let text = encode_biotext(
                    tape,
                    params,
                    &sc.text,
                    &sample.text_tokens,
                    &sample.spans,
                    None,
                )?;
                protein_rows.push(clean.pooled);
                text_rows.push(text.pooled);
            }
            let s = tape.stack_rows(&protein_rows.iter().collect::<Vec<_>>())?;
            let t = tape.stack_rows(&text_rows.iter().collect::<Vec<_>>())?;
            gc_loss(tape, &s, &t, sc.loss.tau1)
        }
        "bsr" => {
            let mut terms = Vec::new();
            for sample in &sc.prepared.samples {
                let masked =
                    encode_protein(tape, params, &sc.protein, &sample.masked_tokens, None)?;
                let text = encode_biotext(
                    tape,
                    params,
                    &sc.text,
                    &sample.text_tokens,
                    &sample.spans,
                    None,
                )?;
                let fused = cross_attention_fuse(tape, params, &masked.hidden, &text.hidden)?;
                terms.push(bsr_loss(tape, params, &fused, &sample.tokens, &sample.segments)?);
            }
            mean_of(tape, terms)
        }
        "mlm" => {
            let mut terms = Vec::new();
            for sample in &sc.prepared.samples {
                let masked =
                    encode_protein(tape, params, &sc.protein, &sample.masked_tokens, None)?;
                terms.push(mlm_loss(
                    tape,
                    params,
                    &masked.hidden,
                    &sample.tokens,
                    &sample.mlm_positions,
                )?);
            }
            mean_of(tape, terms)
        }
        "pda" => {
            let mut terms = Vec::new();
            for sample in &sc.prepared.samples {
                let clean = encode_protein(tape, params, &sc.protein, &sample.tokens, None)?;
                let text = encode_biotext(
                    tape,
                    params,
                    &sc.text,
                    &sample.text_tokens,
                    &sample.spans,
                    None,
                )?;
                let weights =
                    pda_weights(tape, &text.prototypes, &clean.hidden, sc.loss.theta)?;
                let segments = pda_segments(tape, &weights, &clean.hidden)?
                    .ok_or(ObjectiveError::EmptyMask)?;
                let term = pda_loss(tape, &segments, &text.prototypes, sc.loss.tau2)?
                    .ok_or(ObjectiveError::EmptyMask)?;
                terms.push(term);
            }
            mean_of(tape, terms)
        }
        other => Err(ObjectiveError::BadConfig(format!("unknown loss {other}"))),
    }
}

fn loss_value(name: &str, params: &ParamSet, sc: &Scenario) -> Result<f64, ObjectiveError> {
    let mut tape = Tape::new();
    Ok(build_loss(name, &mut tape, params, sc)?.item()?)
}

/// Checks one loss: analytic gradients against central differences on
/// `coords_per_param` deterministically sampled coordinates per parameter.
fn check_loss(
    name: &str,
    sc: &Scenario,
    settings: &CheckSettings,
    seed: u64,
) -> Result<LossCheck, ObjectiveError> {
    let mut tape = Tape::new();
    tape.set_backward_fault_gain(settings.fault_gain);
    let watched = sc.params.watch_all(&mut tape);
    let loss = build_loss(name, &mut tape, &watched, sc)?;
    let grads = tape.backward(&loss)?;

    let mut coordinate_rng = SeededRng::for_worker(seed, fnv1a(name.as_bytes()));
    let mut work = sc.params.clone();
    let mut params_out = Vec::new();
    let mut coords_checked = 0usize;
    let h = settings.step;
    for param in sc.params.names() {
        let analytic = grads.wrt(watched.get(param)?);
        let len = analytic.len();
        let mut worst = ParamCheck {
            name: param.to_owned(),
            index: 0,
            analytic: 0.0,
            numeric: 0.0,
            relative_error: 0.0,
        };
        for _ in 0..settings.coords_per_param.min(len) {
            let i = coordinate_rng.index(len);
            let original = sc.params.get(param)?.data().to_vec();
            let mut perturbed = original.clone();
            perturbed[i] = original[i] + h;
            work.set_data(param, perturbed.clone())?;
            let up = loss_value(name, &work, sc)?;
            perturbed[i] = original[i] - h;
            work.set_data(param, perturbed)?;
            let down = loss_value(name, &work, sc)?;
            work.set_data(param, original)?;
            let numeric = (up - down) / (2.0 * h);
            let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
            let relative = (analytic[i] - numeric).abs() / scale;
            coords_checked += 1;
            if relative > worst.relative_error {
                worst = ParamCheck {
                    name: param.to_owned(),
                    index: i,
                    analytic: analytic[i],
                    numeric,
                    relative_error: relative,
                };
            }
        }
        params_out.push(worst);
    }
    let worst_error =
        params_out.iter().map(|p| p.relative_error).fold(0.0, f64::max);
    Ok(LossCheck {
        loss: name.to_owned(),
        params: params_out,
        worst_error,
        coords_checked,
        passed: worst_error < settings.tolerance,
    })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Runs the finite-difference check for every loss on one frozen scenario.
pub fn check_all(seed: u64, settings: &CheckSettings) -> Result<CheckReport, ObjectiveError> {
    let sc = build_scenario(seed, settings)?;
    let mut losses = Vec::new();
    for name in LOSS_NAMES {
        losses.push(check_loss(name, &sc, settings, seed)?);
    }
    let all_passed = losses.iter().all(|c| c.passed);
    Ok(CheckReport { seed, settings: *settings, losses, all_passed })
}
