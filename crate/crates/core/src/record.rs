//! Protein-biotext records: the four tracked text properties, sequence
//! tokenization, coverage semantics, and prefixed biotext assembly.

use std::fmt;

use thiserror::Error;

/// Residue alphabet: the 20 canonical amino acids in alphabetical order,
/// then `X` for unknown. Token ids follow this ordering (`A` = 0, `X` = 20).
pub const AMINO_ACIDS: &[u8; 21] = b"ACDEFGHIKLMNPQRSTVWYX";

/// Token id of the mask token used by the reconstruction objectives.
pub const MASK_TOKEN: u16 = 21;
/// Token id of the padding token.
pub const PAD_TOKEN: u16 = 22;
/// Residue vocabulary size: 21 alphabet letters + MASK + PAD.
pub const RESIDUE_VOCAB: usize = 23;

#[derive(Debug, Error, PartialEq)]
pub enum RecordError {
    #[error("sequence is empty")]
    EmptySequence,
    #[error("unknown character {ch:?} at position {position}")]
    UnknownCharacter { ch: char, position: usize },
    #[error("unknown token id {0}")]
    UnknownTokenId(u16),
    #[error("confidence {0} outside 1..=5")]
    ConfidenceOutOfRange(i64),
    #[error("record has no property text")]
    NoProperties,
}

/// The four tracked biotext properties, in their fixed assembly and
/// prototype-indexing order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PropertyKind {
    Name,
    Function,
    Location,
    Similarity,
}

/// Number of tracked properties.
pub const PROPERTY_COUNT: usize = 4;

impl PropertyKind {
    pub const ALL: [PropertyKind; PROPERTY_COUNT] = [
        PropertyKind::Name,
        PropertyKind::Function,
        PropertyKind::Location,
        PropertyKind::Similarity,
    ];

    /// Position in the fixed ordering (0..4).
    pub fn index(self) -> usize {
        match self {
            PropertyKind::Name => 0,
            PropertyKind::Function => 1,
            PropertyKind::Location => 2,
            PropertyKind::Similarity => 3,
        }
    }

    /// Annotation prefix emitted in front of this property's description.
    pub fn annotation_prefix(self) -> &'static str {
        match self {
            PropertyKind::Name => "PROTEIN NAME:",
            PropertyKind::Function => "FUNCTION:",
            PropertyKind::Location => "SUBCELLULAR LOCATION:",
            PropertyKind::Similarity => "SIMILARITY:",
        }
    }

    /// Key used for this property in the JSONL corpus schema.
    pub fn json_key(self) -> &'static str {
        match self {
            PropertyKind::Name => "name",
            PropertyKind::Function => "function",
            PropertyKind::Location => "location",
            PropertyKind::Similarity => "similarity",
        }
    }
}

impl fmt::Display for PropertyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.json_key())
    }
}

/// Property coverage: how many of the four properties are present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CoverageLevel {
    present: u8,
}

impl CoverageLevel {
    /// Builds a level from a count in 1..=4. Zero-property records are
    /// rejected at parse time and never reach this type.
    pub fn from_present_count(present: u8) -> Option<CoverageLevel> {
        (1..=PROPERTY_COUNT as u8)
            .contains(&present)
            .then_some(CoverageLevel { present })
    }

    /// Numerator of the coverage fraction R = present/4.
    pub fn quarters(self) -> u8 {
        self.present
    }

    /// Coverage as a real fraction in {1/4, 2/4, 3/4, 4/4}.
    pub fn fraction(self) -> f64 {
        f64::from(self.present) / PROPERTY_COUNT as f64
    }
}

impl fmt::Display for CoverageLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/4", self.present)
    }
}

/// One protein entry: sequence, up to four property texts, annotation
/// confidence, and the manual-review flag.
///
/// Invariants are enforced at construction: the sequence is non-empty and
/// canonical (alphabet characters only), confidence lies in 1..=5, and at
/// least one property text is present. Smaller confidence means a more
/// reliable annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct ProteinRecord {
    entry_name: String,
    sequence: String,
    properties: [Option<String>; PROPERTY_COUNT],
    confidence: u8,
    reviewed: bool,
}

impl ProteinRecord {
    /// Validates the invariants and builds a record. Empty property strings
    /// are normalized to missing. The sequence must already be canonical;
    /// see [`canonicalize_sequence`] for mapping nonstandard letters.
    pub fn new(
        entry_name: impl Into<String>,
        sequence: impl Into<String>,
        mut properties: [Option<String>; PROPERTY_COUNT],
        confidence: u8,
        reviewed: bool,
    ) -> Result<ProteinRecord, RecordError> {
        let sequence = sequence.into();
        validate_sequence(&sequence)?;
        if !(1..=5).contains(&confidence) {
            return Err(RecordError::ConfidenceOutOfRange(i64::from(confidence)));
        }
        for slot in properties.iter_mut() {
            if slot.as_deref().is_some_and(|text| text.is_empty()) {
                *slot = None;
            }
        }
        if properties.iter().all(Option::is_none) {
            return Err(RecordError::NoProperties);
        }
        Ok(ProteinRecord {
            entry_name: entry_name.into(),
            sequence,
            properties,
            confidence,
            reviewed,
        })
    }

    pub fn entry_name(&self) -> &str {
        &self.entry_name
    }

    pub fn sequence(&self) -> &str {
        &self.sequence
    }

    pub fn property(&self, kind: PropertyKind) -> Option<&str> {
        self.properties[kind.index()].as_deref()
    }

    pub fn confidence(&self) -> u8 {
        self.confidence
    }

    pub fn reviewed(&self) -> bool {
        self.reviewed
    }

    /// Kinds whose text is present, in assembly order.
    pub fn present_properties(&self) -> impl Iterator<Item = PropertyKind> + '_ {
        PropertyKind::ALL
            .into_iter()
            .filter(|kind| self.property(*kind).is_some())
    }
}

fn validate_sequence(sequence: &str) -> Result<(), RecordError> {
    if sequence.is_empty() {
        return Err(RecordError::EmptySequence);
    }
    for (position, ch) in sequence.chars().enumerate() {
        if !AMINO_ACIDS.contains(&(ch as u8)) || !ch.is_ascii() {
            return Err(RecordError::UnknownCharacter { ch, position });
        }
    }
    Ok(())
}

/// Maps the nonstandard letters B, Z, U, O to `X` and returns the canonical
/// sequence together with how many characters were mapped. Any other
/// out-of-alphabet character is an error.
pub fn canonicalize_sequence(sequence: &str) -> Result<(String, usize), RecordError> {
    if sequence.is_empty() {
        return Err(RecordError::EmptySequence);
    }
    let mut canonical = String::with_capacity(sequence.len());
    let mut mapped = 0;
    for (position, ch) in sequence.chars().enumerate() {
        match ch {
            'B' | 'Z' | 'U' | 'O' => {
                canonical.push('X');
                mapped += 1;
            }
            _ if ch.is_ascii() && AMINO_ACIDS.contains(&(ch as u8)) => canonical.push(ch),
            _ => return Err(RecordError::UnknownCharacter { ch, position }),
        }
    }
    Ok((canonical, mapped))
}

/// Coverage of a record: the count of present property texts over four.
pub fn compute_coverage(record: &ProteinRecord) -> CoverageLevel {
    let present = record.present_properties().count() as u8;
    CoverageLevel::from_present_count(present)
        .expect("record invariant guarantees 1..=4 properties")
}

/// Assembles the biotext input: present properties in fixed order, each as
/// `"PREFIX: text"`, joined with a single space. Missing properties are
/// omitted and source punctuation is preserved verbatim.
pub fn assemble_biotext(record: &ProteinRecord) -> String {
    let mut out = String::new();
    for kind in record.present_properties() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(kind.annotation_prefix());
        out.push(' ');
        out.push_str(record.property(kind).expect("present"));
    }
    out
}

/// Per-character residue token ids under the documented alphabet ordering.
pub fn tokenize_sequence(sequence: &str) -> Result<Vec<u16>, RecordError> {
    if sequence.is_empty() {
        return Err(RecordError::EmptySequence);
    }
    sequence
        .chars()
        .enumerate()
        .map(|(position, ch)| {
            AMINO_ACIDS
                .iter()
                .position(|&a| ch.is_ascii() && a == ch as u8)
                .map(|id| id as u16)
                .ok_or(RecordError::UnknownCharacter { ch, position })
        })
        .collect()
}

/// Inverse of [`tokenize_sequence`] on alphabet ids; MASK and PAD have no
/// character form and are rejected.
pub fn detokenize_sequence(tokens: &[u16]) -> Result<String, RecordError> {
    tokens
        .iter()
        .map(|&id| {
            AMINO_ACIDS
                .get(id as usize)
                .map(|&b| b as char)
                .ok_or(RecordError::UnknownTokenId(id))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn props(
        name: Option<&str>,
        function: Option<&str>,
        location: Option<&str>,
        similarity: Option<&str>,
    ) -> [Option<String>; PROPERTY_COUNT] {
        [name, function, location, similarity].map(|p| p.map(str::to_owned))
    }

    fn full_record() -> ProteinRecord {
        ProteinRecord::new(
            "A0A010SAB3_9PEZI",
            "MANSPHGGVLKDLFARDAPRQSELFAEADKLPSL",
            props(
                Some("Sulfate adenylyltransferase."),
                Some("Catalyzes the first intracellular reaction of sulfate assimilation."),
                Some("Cytoplasm."),
                Some("Belongs to the APS kinase family."),
            ),
            1,
            true,
        )
        .unwrap()
    }

    #[test]
    fn coverage_full_record() {
        assert_eq!(compute_coverage(&full_record()).quarters(), 4);
        assert_eq!(compute_coverage(&full_record()).fraction(), 1.0);
    }

    #[test]
    fn coverage_name_only() {
        let record = ProteinRecord::new(
            "A0A024R324_HUMAN",
            "MAAIRKKLVIVGDGACGKTCLLIVFSKDQFPEVYVPTVFENYVADIE",
            props(
                Some("Epididymis secretory sperm binding protein."),
                None,
                None,
                None,
            ),
            1,
            true,
        )
        .unwrap();
        let coverage = compute_coverage(&record);
        assert_eq!(coverage.quarters(), 1);
        assert_eq!(coverage.to_string(), "1/4");
    }

    #[test]
    fn coverage_missing_location() {
        // Name + Function + Similarity, no Subcellular Location.
        let record = ProteinRecord::new(
            "A0A009GHC8_ACIBA",
            "MDIFPISLKLQQQRCLIVGGGHIALRKATLLAKAGAIIDVVAPAIED",
            props(
                Some("Siroheme synthase."),
                Some("Multifunctional enzyme that catalyzes the SAM-dependent methylations."),
                None,
                Some("Belongs to the precorrin methyltransferase family."),
            ),
            1,
            true,
        )
        .unwrap();
        assert_eq!(compute_coverage(&record).quarters(), 3);
    }

    #[test]
    fn coverage_times_four_is_present_count() {
        let record = full_record();
        let present = record.present_properties().count();
        assert_eq!(compute_coverage(&record).fraction() * 4.0, present as f64);
    }

    #[test]
    fn biotext_all_four_properties() {
        let expected = "PROTEIN NAME: Sulfate adenylyltransferase. \
                        FUNCTION: Catalyzes the first intracellular reaction of sulfate assimilation. \
                        SUBCELLULAR LOCATION: Cytoplasm. \
                        SIMILARITY: Belongs to the APS kinase family.";
        assert_eq!(assemble_biotext(&full_record()), expected);
    }

    #[test]
    fn biotext_name_only() {
        let record = ProteinRecord::new(
            "A0A024R324_HUMAN",
            "MAAIRKK",
            props(
                Some("Epididymis secretory sperm binding protein."),
                None,
                None,
                None,
            ),
            1,
            true,
        )
        .unwrap();
        assert_eq!(
            assemble_biotext(&record),
            "PROTEIN NAME: Epididymis secretory sperm binding protein."
        );
    }

    #[test]
    fn biotext_omits_empty_function() {
        // An empty Function string counts as missing: no FUNCTION prefix.
        let record = ProteinRecord::new(
            "E1",
            "ACDEF",
            props(Some("Alpha."), Some(""), None, Some("Beta family.")),
            2,
            false,
        )
        .unwrap();
        assert_eq!(
            assemble_biotext(&record),
            "PROTEIN NAME: Alpha. SIMILARITY: Beta family."
        );
        assert!(!assemble_biotext(&record).contains("FUNCTION:"));
    }

    #[test]
    fn biotext_idempotent_deterministic() {
        let record = full_record();
        assert_eq!(assemble_biotext(&record), assemble_biotext(&record));
    }

    #[test]
    fn tokenize_first_letter() {
        assert_eq!(tokenize_sequence("A").unwrap(), vec![0]);
    }

    #[test]
    fn tokenize_empty_is_error() {
        assert_eq!(tokenize_sequence(""), Err(RecordError::EmptySequence));
    }

    #[test]
    fn tokenize_unknown_character() {
        assert_eq!(
            tokenize_sequence("AB"),
            Err(RecordError::UnknownCharacter { ch: 'B', position: 1 })
        );
    }

    #[test]
    fn tokenize_detokenize_roundtrip_random() {
        let mut rng = SeededRng::new(0x5eed);
        for _ in 0..10_000 {
            let len = rng.range_inclusive(1, 60);
            let sequence: String = (0..len)
                .map(|_| AMINO_ACIDS[rng.index(AMINO_ACIDS.len())] as char)
                .collect();
            let tokens = tokenize_sequence(&sequence).unwrap();
            assert_eq!(detokenize_sequence(&tokens).unwrap(), sequence);
        }
    }

    #[test]
    fn detokenize_rejects_mask_and_pad() {
        assert_eq!(
            detokenize_sequence(&[MASK_TOKEN]),
            Err(RecordError::UnknownTokenId(MASK_TOKEN))
        );
        assert_eq!(
            detokenize_sequence(&[PAD_TOKEN]),
            Err(RecordError::UnknownTokenId(PAD_TOKEN))
        );
    }

    #[test]
    fn canonicalize_maps_nonstandard_to_x() {
        let (canonical, mapped) = canonicalize_sequence("ABZUOC").unwrap();
        assert_eq!(canonical, "AXXXXC");
        assert_eq!(mapped, 4);
    }

    #[test]
    fn canonicalize_rejects_garbage() {
        assert!(matches!(
            canonicalize_sequence("AC1"),
            Err(RecordError::UnknownCharacter { ch: '1', position: 2 })
        ));
    }

    #[test]
    fn record_invariants_enforced() {
        assert_eq!(
            ProteinRecord::new("E", "", props(Some("x"), None, None, None), 1, true).unwrap_err(),
            RecordError::EmptySequence
        );
        assert_eq!(
            ProteinRecord::new("E", "ACD", props(Some("x"), None, None, None), 6, true)
                .unwrap_err(),
            RecordError::ConfidenceOutOfRange(6)
        );
        assert_eq!(
            ProteinRecord::new("E", "ACD", props(None, None, None, None), 1, true).unwrap_err(),
            RecordError::NoProperties
        );
        assert_eq!(
            ProteinRecord::new("E", "ACD", props(Some(""), None, None, None), 1, true)
                .unwrap_err(),
            RecordError::NoProperties
        );
    }
}
