//! Protein-biotext pre-training at desk scale.
//!
//! The crate is organized around the pre-training pipeline:
//!
//! - [`record`] — protein records, the four tracked text properties, residue
//!   tokenization, and prefixed biotext assembly.
//! - [`curation`] — streaming JSONL ingest, validation, the pre-training
//!   filter, and per-cluster corpus statistics.
//! - [`sampler`] — the property-driven sampling distribution over
//!   (confidence, coverage) clusters and O(1) alias-method batch draws.
//! - [`tensor`] — a dense f64 tensor engine with reverse-mode differentiation.
//! - [`encoders`] — toy transformer encoders for both modalities, the
//!   cross-attention fusion block, the prototype memory bank, and binary
//!   checkpoints.
//! - [`objectives`] — the four pre-training losses (global contrastive,
//!   static segment reconstruction, dynamic segment alignment, masked
//!   language modeling), their weighted combination, and the training driver.
//! - [`gradcheck`] — a finite-difference verification harness for every loss.
//! - [`synth`] — deterministic synthetic corpora for tests and demos.

pub mod curation;
pub mod encoders;
pub mod gradcheck;
pub mod objectives;
pub mod record;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod tensor;
