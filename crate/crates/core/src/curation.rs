//! Streaming corpus ingest: JSONL parsing with per-line rejection
//! accounting, the pre-training filter, per-cluster statistics, and the
//! corpus manifest artifact.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::record::{
    canonicalize_sequence, compute_coverage, CoverageLevel, ProteinRecord, PropertyKind,
    RecordError, PROPERTY_COUNT,
};

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("I/O failure: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {reason}")]
    MalformedRecord { line: u64, reason: String },
}

/// Why a line was rejected during ingest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    MalformedJson(String),
    EmptySequence,
    UnknownCharacter(char),
    ConfidenceOutOfRange(i64),
    NoProperties,
}

impl RejectReason {
    /// Stable key used for per-reason counts in the manifest.
    pub fn key(&self) -> &'static str {
        match self {
            RejectReason::MalformedJson(_) => "malformed_json",
            RejectReason::EmptySequence => "empty_sequence",
            RejectReason::UnknownCharacter(_) => "unknown_character",
            RejectReason::ConfidenceOutOfRange(_) => "confidence_out_of_range",
            RejectReason::NoProperties => "no_properties",
        }
    }

    pub fn describe(&self) -> String {
        match self {
            RejectReason::MalformedJson(msg) => format!("malformed JSON: {msg}"),
            RejectReason::EmptySequence => "empty sequence".to_owned(),
            RejectReason::UnknownCharacter(ch) => format!("unknown sequence character {ch:?}"),
            RejectReason::ConfidenceOutOfRange(c) => format!("confidence {c} outside 1..=5"),
            RejectReason::NoProperties => "no property text".to_owned(),
        }
    }
}

/// A rejected input line: 1-based line number, entry name when the JSON was
/// at least readable, and the reason.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub line: u64,
    pub entry_name: Option<String>,
    pub reason: RejectReason,
}

/// JSONL schema of one corpus line.
#[derive(Deserialize)]
struct RawRecord {
    entry_name: String,
    sequence: String,
    properties: RawProperties,
    confidence: i64,
    reviewed: bool,
}

#[derive(Deserialize)]
struct RawProperties {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    function: Option<String>,
    #[serde(default)]
    location: Option<String>,
    #[serde(default)]
    similarity: Option<String>,
}

/// One ingest event from [`RecordStream`].
#[derive(Debug)]
pub enum StreamItem {
    Record(ProteinRecord),
    Rejected(Rejection),
}

/// Streams records out of a JSONL reader in input order. In strict mode the
/// first malformed line surfaces as an error and the stream ends; otherwise
/// malformed lines come through as [`StreamItem::Rejected`].
pub struct RecordStream<R> {
    reader: R,
    strict: bool,
    line: u64,
    nonstandard_residues: u64,
    done: bool,
    buf: String,
}

impl<R: BufRead> RecordStream<R> {
    pub fn new(reader: R, strict: bool) -> RecordStream<R> {
        RecordStream {
            reader,
            strict,
            line: 0,
            nonstandard_residues: 0,
            done: false,
            buf: String::new(),
        }
    }

    /// Lines consumed so far.
    pub fn lines_consumed(&self) -> u64 {
        self.line
    }

    /// Total sequence characters canonicalized to `X` so far.
    pub fn nonstandard_residues(&self) -> u64 {
        self.nonstandard_residues
    }

    fn parse_line(&mut self) -> Result<ProteinRecord, RejectReason> {
        let raw: RawRecord = serde_json::from_str(&self.buf)
            .map_err(|e| RejectReason::MalformedJson(e.to_string()))?;
        let (sequence, mapped) = canonicalize_sequence(&raw.sequence).map_err(|e| match e {
            RecordError::EmptySequence => RejectReason::EmptySequence,
            RecordError::UnknownCharacter { ch, .. } => RejectReason::UnknownCharacter(ch),
            other => RejectReason::MalformedJson(other.to_string()),
        })?;
        self.nonstandard_residues += mapped as u64;
        let confidence =
            u8::try_from(raw.confidence).map_err(|_| RejectReason::ConfidenceOutOfRange(raw.confidence))?;
        let properties: [Option<String>; PROPERTY_COUNT] = [
            raw.properties.name,
            raw.properties.function,
            raw.properties.location,
            raw.properties.similarity,
        ];
        ProteinRecord::new(raw.entry_name, sequence, properties, confidence, raw.reviewed).map_err(
            |e| match e {
                RecordError::ConfidenceOutOfRange(c) => RejectReason::ConfidenceOutOfRange(c),
                RecordError::NoProperties => RejectReason::NoProperties,
                RecordError::EmptySequence => RejectReason::EmptySequence,
                RecordError::UnknownCharacter { ch, .. } => RejectReason::UnknownCharacter(ch),
                other => RejectReason::MalformedJson(other.to_string()),
            },
        )
    }
}

impl<R: BufRead> Iterator for RecordStream<R> {
    type Item = Result<StreamItem, CurationError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        self.buf.clear();
        match self.reader.read_line(&mut self.buf) {
            Ok(0) => {
                self.done = true;
                None
            }
            Ok(_) => {
                self.line += 1;
                match self.parse_line() {
                    Ok(record) => Some(Ok(StreamItem::Record(record))),
                    Err(reason) => {
                        let entry_name = serde_json::from_str::<serde_json::Value>(&self.buf)
                            .ok()
                            .and_then(|v| v.get("entry_name")?.as_str().map(str::to_owned));
                        if self.strict {
                            self.done = true;
                            Some(Err(CurationError::MalformedRecord {
                                line: self.line,
                                reason: reason.describe(),
                            }))
                        } else {
                            Some(Ok(StreamItem::Rejected(Rejection {
                                line: self.line,
                                entry_name,
                                reason,
                            })))
                        }
                    }
                }
            }
            Err(e) => {
                self.done = true;
                Some(Err(CurationError::Io(e)))
            }
        }
    }
}

/// A (confidence, coverage) cluster address. Exactly 20 keys exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClusterKey {
    pub confidence: u8,
    pub coverage: CoverageLevel,
}

impl ClusterKey {
    pub fn new(confidence: u8, coverage: CoverageLevel) -> ClusterKey {
        ClusterKey { confidence, coverage }
    }

    pub fn of(record: &ProteinRecord) -> ClusterKey {
        ClusterKey {
            confidence: record.confidence(),
            coverage: compute_coverage(record),
        }
    }

    /// All 20 keys in (confidence, coverage) order.
    pub fn all() -> impl Iterator<Item = ClusterKey> {
        (1..=5u8).flat_map(|confidence| {
            (1..=4u8).map(move |q| ClusterKey {
                confidence,
                coverage: CoverageLevel::from_present_count(q).expect("1..=4"),
            })
        })
    }
}

/// Exact per-cluster record counts. Merging is associative and commutative,
/// so sharded ingests fold into the same totals in any order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<ClusterRow>", try_from = "Vec<ClusterRow>")]
pub struct ClusterStats {
    counts: BTreeMap<ClusterKey, u64>,
    total: u64,
}

impl ClusterStats {
    pub fn new() -> ClusterStats {
        ClusterStats::default()
    }

    pub fn observe(&mut self, key: ClusterKey) {
        *self.counts.entry(key).or_insert(0) += 1;
        self.total += 1;
    }

    pub fn observe_record(&mut self, record: &ProteinRecord) {
        self.observe(ClusterKey::of(record));
    }

    pub fn merge(&mut self, other: &ClusterStats) {
        for (key, count) in &other.counts {
            *self.counts.entry(*key).or_insert(0) += count;
        }
        self.total += other.total;
    }

    pub fn count(&self, key: &ClusterKey) -> u64 {
        self.counts.get(key).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Nonempty clusters in key order.
    pub fn nonempty(&self) -> impl Iterator<Item = (ClusterKey, u64)> + '_ {
        self.counts.iter().filter(|(_, &n)| n > 0).map(|(&k, &n)| (k, n))
    }

    /// Fraction of records at each confidence level 1..=5 (index 0 ↔ level 1).
    /// All zeros when the stats are empty.
    pub fn confidence_marginals(&self) -> [f64; 5] {
        let mut out = [0.0; 5];
        if self.total == 0 {
            return out;
        }
        for (key, count) in &self.counts {
            out[key.confidence as usize - 1] += *count as f64 / self.total as f64;
        }
        out
    }

    /// Fraction of records at each coverage level 1/4..=4/4 (index 0 ↔ 1/4).
    pub fn coverage_marginals(&self) -> [f64; 4] {
        let mut out = [0.0; 4];
        if self.total == 0 {
            return out;
        }
        for (key, count) in &self.counts {
            out[key.coverage.quarters() as usize - 1] += *count as f64 / self.total as f64;
        }
        out
    }
}

/// Serialized form of one cluster count.
#[derive(Serialize, Deserialize)]
struct ClusterRow {
    confidence: u8,
    coverage: String,
    count: u64,
}

impl From<ClusterStats> for Vec<ClusterRow> {
    fn from(stats: ClusterStats) -> Vec<ClusterRow> {
        stats
            .counts
            .iter()
            .map(|(key, &count)| ClusterRow {
                confidence: key.confidence,
                coverage: key.coverage.to_string(),
                count,
            })
            .collect()
    }
}

impl TryFrom<Vec<ClusterRow>> for ClusterStats {
    type Error = String;

    fn try_from(rows: Vec<ClusterRow>) -> Result<ClusterStats, String> {
        let mut stats = ClusterStats::new();
        for row in rows {
            if !(1..=5).contains(&row.confidence) {
                return Err(format!("confidence {} outside 1..=5", row.confidence));
            }
            let quarters = match row.coverage.as_str() {
                "1/4" => 1,
                "2/4" => 2,
                "3/4" => 3,
                "4/4" => 4,
                other => return Err(format!("unrecognized coverage {other:?}")),
            };
            let key = ClusterKey::new(
                row.confidence,
                CoverageLevel::from_present_count(quarters).expect("1..=4"),
            );
            if stats.counts.insert(key, row.count).is_some() {
                return Err(format!("duplicate cluster ({}, {})", row.confidence, row.coverage));
            }
            stats.total += row.count;
        }
        Ok(stats)
    }
}

/// Why the pre-training filter dropped a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    /// Confidence 4 or 5: machine-annotated, less reliable.
    LowConfidence,
    /// Coverage 1/4 or 2/4: too few property texts.
    LowCoverage,
}

/// The pre-training admission rule: drop confidence 4–5 and coverage
/// 1/4–2/4, keep everything else. When both rules fire, low confidence is
/// the reported reason so per-reason accounting is deterministic.
pub fn pretraining_drop_reason(confidence: u8, coverage: CoverageLevel) -> Option<DropReason> {
    if confidence >= 4 {
        Some(DropReason::LowConfidence)
    } else if coverage.quarters() <= 2 {
        Some(DropReason::LowCoverage)
    } else {
        None
    }
}

/// Per-reason accounting for a filtering pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FilterCounts {
    pub kept: u64,
    pub low_confidence: u64,
    pub low_coverage: u64,
}

impl FilterCounts {
    /// Records the decision for one record and returns whether it is kept.
    pub fn admit(&mut self, record: &ProteinRecord) -> bool {
        match pretraining_drop_reason(record.confidence(), compute_coverage(record)) {
            None => {
                self.kept += 1;
                true
            }
            Some(DropReason::LowConfidence) => {
                self.low_confidence += 1;
                false
            }
            Some(DropReason::LowCoverage) => {
                self.low_coverage += 1;
                false
            }
        }
    }

    pub fn dropped(&self) -> u64 {
        self.low_confidence + self.low_coverage
    }
}

/// Splits records into the pre-training subset and per-reason drop counts.
pub fn filter_for_pretraining(records: Vec<ProteinRecord>) -> (Vec<ProteinRecord>, FilterCounts) {
    let mut counts = FilterCounts::default();
    let kept = records.into_iter().filter(|r| counts.admit(r)).collect();
    (kept, counts)
}

/// Reader adapter that folds every byte it yields into a SHA-256 digest.
pub struct HashingReader<R> {
    inner: R,
    hasher: Sha256,
}

impl<R: Read> HashingReader<R> {
    pub fn new(inner: R) -> HashingReader<R> {
        HashingReader { inner, hasher: Sha256::new() }
    }

    /// Hex digest of everything read so far.
    pub fn finish(self) -> String {
        hex_digest(self.hasher)
    }
}

impl<R: Read> Read for HashingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }
}

fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// SHA-256 hex digest of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_digest(hasher)
}

/// Everything one ingest pass produces.
#[derive(Debug)]
pub struct IngestOutcome {
    pub records: Vec<ProteinRecord>,
    pub rejections: Vec<Rejection>,
    pub stats: ClusterStats,
    pub lines: u64,
    pub nonstandard_residues: u64,
}

/// Drives a [`RecordStream`] to completion, collecting records, rejections,
/// and raw (pre-filter) cluster statistics.
pub fn ingest<R: BufRead>(reader: R, strict: bool) -> Result<IngestOutcome, CurationError> {
    let mut stream = RecordStream::new(reader, strict);
    let mut records = Vec::new();
    let mut rejections = Vec::new();
    let mut stats = ClusterStats::new();
    for item in stream.by_ref() {
        match item? {
            StreamItem::Record(record) => {
                stats.observe_record(&record);
                records.push(record);
            }
            StreamItem::Rejected(rejection) => rejections.push(rejection),
        }
    }
    Ok(IngestOutcome {
        lines: stream.lines_consumed(),
        nonstandard_residues: stream.nonstandard_residues(),
        records,
        rejections,
        stats,
    })
}

/// Summary artifact of one ingest: provenance, accounting, and the raw
/// cluster statistics. `records + Σ rejected = lines`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub sources: Vec<String>,
    pub input_sha256: String,
    pub lines: u64,
    pub records: u64,
    pub rejected: BTreeMap<String, u64>,
    pub nonstandard_residues: u64,
    pub clusters: ClusterStats,
}

impl CorpusManifest {
    pub fn from_outcome(
        sources: Vec<String>,
        input_sha256: String,
        outcome: &IngestOutcome,
    ) -> CorpusManifest {
        let mut rejected = BTreeMap::new();
        for rejection in &outcome.rejections {
            *rejected.entry(rejection.reason.key().to_owned()).or_insert(0) += 1;
        }
        CorpusManifest {
            sources,
            input_sha256,
            lines: outcome.lines,
            records: outcome.records.len() as u64,
            rejected,
            nonstandard_residues: outcome.nonstandard_residues,
            clusters: outcome.stats.clone(),
        }
    }

    pub fn rejected_total(&self) -> u64 {
        self.rejected.values().sum()
    }

    /// Checks the internal accounting identities.
    pub fn validate(&self) -> Result<(), String> {
        if self.records + self.rejected_total() != self.lines {
            return Err(format!(
                "accounting mismatch: {} records + {} rejected != {} lines",
                self.records,
                self.rejected_total(),
                self.lines
            ));
        }
        if self.clusters.total() != self.records {
            return Err(format!(
                "cluster total {} != record count {}",
                self.clusters.total(),
                self.records
            ));
        }
        Ok(())
    }
}

/// Writes the manifest as pretty JSON.
pub fn write_manifest(manifest: &CorpusManifest, path: &Path) -> Result<(), CurationError> {
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(path, json + "\n")?;
    Ok(())
}

/// Reads a manifest back and revalidates its accounting.
pub fn read_manifest(path: &Path) -> Result<CorpusManifest, CurationError> {
    let text = std::fs::read_to_string(path)?;
    let manifest: CorpusManifest =
        serde_json::from_str(&text).map_err(|e| CurationError::MalformedRecord {
            line: 0,
            reason: format!("manifest parse: {e}"),
        })?;
    manifest.validate().map_err(|reason| CurationError::MalformedRecord { line: 0, reason })?;
    Ok(manifest)
}

/// Writes all 20 cluster counts as CSV with header `confidence,coverage,count`.
pub fn write_stats_csv<W: Write>(stats: &ClusterStats, out: &mut W) -> io::Result<()> {
    writeln!(out, "confidence,coverage,count")?;
    for key in ClusterKey::all() {
        writeln!(out, "{},{},{}", key.confidence, key.coverage, stats.count(&key))?;
    }
    Ok(())
}

/// Formats one record back into its JSONL line (used by fixture generators
/// and the curate command's cleaned-output mode).
pub fn record_to_json_line(record: &ProteinRecord) -> String {
    let mut properties = serde_json::Map::new();
    for kind in PropertyKind::ALL {
        if let Some(text) = record.property(kind) {
            properties.insert(kind.json_key().to_owned(), serde_json::Value::from(text));
        }
    }
    let value = serde_json::json!({
        "entry_name": record.entry_name(),
        "sequence": record.sequence(),
        "properties": properties,
        "confidence": record.confidence(),
        "reviewed": record.reviewed(),
    });
    serde_json::to_string(&value).expect("record serializes")
}
