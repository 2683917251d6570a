//! Hash-based biotext tokenizer and property span extraction.
//!
//! Words are whitespace-separated and hashed (FNV-1a, 64-bit) into a fixed
//! vocabulary; id 0 is reserved as padding. The tokenizer needs no fitted
//! vocabulary file, keeps identical words identical across runs, and makes
//! collisions explicit (they are a hash-bucket property, not hidden state).

use std::ops::Range;

use crate::record::{ProteinRecord, PropertyKind, PROPERTY_COUNT};

use super::EncoderError;

/// Reserved padding id for biotext tokens.
pub const TEXT_PAD: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextTokenizer {
    vocab: usize,
}

impl TextTokenizer {
    /// Vocabulary of `vocab` ids: 0 is padding, 1..vocab are hash buckets.
    pub fn new(vocab: usize) -> Result<TextTokenizer, EncoderError> {
        if vocab < 2 {
            return Err(EncoderError::BadConfig(format!(
                "text vocabulary {vocab} leaves no room for words"
            )));
        }
        Ok(TextTokenizer { vocab })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    fn word_id(&self, word: &str) -> usize {
        1 + (fnv1a64(word.as_bytes()) % (self.vocab as u64 - 1)) as usize
    }

    /// One id per whitespace-separated word, in order.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.word_id(w)).collect()
    }

    /// Tokenizes a record's assembled biotext and locates each present
    /// property's token span. A span covers the property's annotation
    /// prefix and its description words; absent properties have no span.
    pub fn tokenize_record(
        &self,
        record: &ProteinRecord,
    ) -> (Vec<usize>, [Option<Range<usize>>; PROPERTY_COUNT]) {
        let mut tokens = Vec::new();
        let mut spans: [Option<Range<usize>>; PROPERTY_COUNT] = Default::default();
        for kind in PropertyKind::ALL {
            let Some(text) = record.property(kind) else {
                continue;
            };
            let start = tokens.len();
            tokens.extend(self.tokenize(kind.annotation_prefix()));
            tokens.extend(self.tokenize(text));
            spans[kind.index()] = Some(start..tokens.len());
        }
        (tokens, spans)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
