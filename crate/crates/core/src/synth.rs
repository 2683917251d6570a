//! Deterministic synthetic corpora for tests, demos, and acceptance runs.
//!
//! Two generators cover the pipeline's needs: a mixed-confidence corpus
//! whose confidence marginals hit exact target counts (for statistics and
//! sampling machinery), and a planted-correspondence corpus where each
//! protein carries a distinctive residue motif and its biotext a matching
//! unique keyword, so contrastive training has a learnable signal.

use crate::curation::record_to_json_line;
use crate::record::{ProteinRecord, AMINO_ACIDS};
use crate::rng::SeededRng;

/// Confidence composition of the shipped 10 000-record fixture: counts at
/// levels 1..=5, giving marginals (0.1982, 0.0980, 0.6777, 0.0229, 0.0032).
pub const FIXTURE_CONFIDENCE_COUNTS: [u64; 5] = [1982, 980, 6777, 229, 32];

/// Seed of the shipped fixtures; regeneration must be byte-identical.
pub const FIXTURE_SEED: u64 = 20_240_817;

fn random_sequence(rng: &mut SeededRng, len: usize) -> String {
    (0..len).map(|_| AMINO_ACIDS[rng.index(20)] as char).collect()
}

const LOCATIONS: [&str; 4] = ["Cytoplasm.", "Membrane.", "Nucleus.", "Secreted."];

/// One synthetic record. Coverage cycles through 1/4..4/4 deterministically
/// from `variant` (the name property is always present), confidence is as
/// given, and records at confidence 1–2 are marked reviewed.
fn synthetic_record(rng: &mut SeededRng, label: &str, confidence: u8, variant: u64) -> ProteinRecord {
    let tag = rng.next_u64() % 100_000;
    let present = 1 + (variant % 4) as usize;
    let mut properties: [Option<String>; 4] = [
        Some(format!("Protein {label} homolog {tag}")),
        Some(format!("Catalyzes reaction {tag} of pathway {}.", tag % 97)),
        Some(LOCATIONS[(tag % 4) as usize].to_owned()),
        Some(format!("Belongs to family {}.", tag % 53)),
    ];
    for slot in properties.iter_mut().skip(present) {
        *slot = None;
    }
    let len = rng.range_inclusive(12, 30);
    ProteinRecord::new(
        format!("{label}_HUMAN"),
        random_sequence(rng, len),
        properties,
        confidence,
        confidence <= 2,
    )
    .expect("synthetic record is valid")
}

/// Corpus with exactly `counts[c-1]` records at each confidence level `c`,
/// property coverage cycling through all four levels within each stratum.
pub fn confidence_ladder(counts: [u64; 5], rng: &mut SeededRng) -> Vec<ProteinRecord> {
    let mut records = Vec::new();
    for (level, &count) in counts.iter().enumerate() {
        let confidence = level as u8 + 1;
        for i in 0..count {
            let label = format!("SYN{confidence}N{i}");
            records.push(synthetic_record(rng, &label, confidence, i));
        }
    }
    records
}

/// The 10k mixed-confidence fixture behind the shipped
/// `fixtures/confidence_mix_10k.jsonl`.
pub fn confidence_mix_10k() -> Vec<ProteinRecord> {
    let mut rng = SeededRng::new(FIXTURE_SEED);
    confidence_ladder(FIXTURE_CONFIDENCE_COUNTS, &mut rng)
}

/// Builds `count` protein–biotext pairs with a planted correspondence:
/// pair `i` gets a sequence dominated by a two-residue motif unique to `i`
/// and a function text containing keywords unique to `i`, so in-batch
/// retrieval is learnable from scratch. All records are confidence 1 with
/// full coverage, so the pre-training filter keeps every pair.
pub fn planted_pairs(count: usize, rng: &mut SeededRng) -> Vec<ProteinRecord> {
    (0..count)
        .map(|i| {
            let first = AMINO_ACIDS[i % 20] as char;
            let second = AMINO_ACIDS[(i / 20 + 7) % 20] as char;
            let repeats = rng.range_inclusive(12, 18);
            let mut sequence = String::new();
            for _ in 0..repeats {
                sequence.push(first);
                sequence.push(second);
            }
            ProteinRecord::new(
                format!("PLANT{i}_SYN"),
                sequence,
                [
                    Some(format!("Protein planta{i}")),
                    Some(format!(
                        "Catalyzes the motif{i} reaction acting on substrate sub{i}."
                    )),
                    Some(LOCATIONS[i % 4].to_owned()),
                    Some(format!("Belongs to the planted{} family.", i / 4)),
                ],
                1,
                true,
            )
            .expect("planted record is valid")
        })
        .collect()
}

/// The 64-pair planted corpus behind the shipped
/// `fixtures/planted_pairs_64.jsonl`.
pub fn planted_pairs_64() -> Vec<ProteinRecord> {
    let mut rng = SeededRng::new(FIXTURE_SEED ^ 0x70AB);
    planted_pairs(64, &mut rng)
}

/// Serializes records as JSON Lines (one record per line, trailing newline).
pub fn to_jsonl(records: &[ProteinRecord]) -> String {
    let mut out = String::new();
    for record in records {
        out.push_str(&record_to_json_line(record));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::{ingest, ClusterStats};
    use std::io::BufReader;

    #[test]
    fn ladder_hits_exact_confidence_counts() {
        let mut rng = SeededRng::new(5);
        let records = confidence_ladder([3, 1, 4, 1, 5], &mut rng);
        assert_eq!(records.len(), 14);
        let mut counts = [0u64; 5];
        for record in &records {
            counts[record.confidence() as usize - 1] += 1;
        }
        assert_eq!(counts, [3, 1, 4, 1, 5]);
    }

    #[test]
    fn fixture_marginals_match_targets_exactly() {
        let records = confidence_mix_10k();
        assert_eq!(records.len(), 10_000);
        let mut stats = ClusterStats::new();
        for record in &records {
            stats.observe_record(record);
        }
        let marginals = stats.confidence_marginals();
        let targets = [0.1982, 0.0980, 0.6777, 0.0229, 0.0032];
        for (m, t) in marginals.iter().zip(&targets) {
            assert!((m - t).abs() < 1e-12, "{m} vs {t}");
        }
    }

    #[test]
    fn generated_jsonl_reingests_cleanly() {
        let mut rng = SeededRng::new(9);
        let records = confidence_ladder([5, 5, 5, 5, 5], &mut rng);
        let text = to_jsonl(&records);
        let outcome = ingest(BufReader::new(text.as_bytes()), true).unwrap();
        assert_eq!(outcome.records.len(), 25);
        assert!(outcome.rejections.is_empty());
        for (a, b) in records.iter().zip(&outcome.records) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn planted_pairs_have_distinct_motifs_and_keywords() {
        let mut rng = SeededRng::new(11);
        let records = planted_pairs(64, &mut rng);
        assert_eq!(records.len(), 64);
        let mut motifs = std::collections::BTreeSet::new();
        let mut keywords = std::collections::BTreeSet::new();
        for record in &records {
            motifs.insert(record.sequence()[..2].to_owned());
            let function = record.property(crate::record::PropertyKind::Function).unwrap();
            keywords.insert(function.split_whitespace().nth(2).unwrap().to_owned());
            assert_eq!(record.confidence(), 1);
        }
        assert_eq!(motifs.len(), 64, "motifs collide");
        assert_eq!(keywords.len(), 64, "keywords collide");
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(to_jsonl(&confidence_mix_10k()), to_jsonl(&confidence_mix_10k()));
        assert_eq!(to_jsonl(&planted_pairs_64()), to_jsonl(&planted_pairs_64()));
    }
}
