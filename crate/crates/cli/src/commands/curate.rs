//! `protext curate` — validates a JSONL corpus and writes the kept records,
//! the full cluster-count table, and a corpus manifest with checksums and
//! per-reason rejection counts. Under `--strict` the first malformed record
//! aborts the run instead of being skipped.

use std::path::Path;

use protext_core::curation::{
    record_to_json_line, sha256_hex, write_manifest, write_stats_csv, CorpusManifest,
};

use crate::config::ConfigReader;
use crate::error::CliError;
use crate::manifest::{ensure_out_dir, write_output, RunManifest};

use super::{read_corpus, Common, DEFAULT_SEED};

pub const KEPT_FILE: &str = "kept.jsonl";
pub const STATS_FILE: &str = "stats.csv";
pub const CORPUS_MANIFEST_FILE: &str = "corpus_manifest.json";

pub fn run(common: &Common, input: &Path) -> Result<(), CliError> {
    let mut seed = DEFAULT_SEED;
    let mut reader = ConfigReader::new(&common.flat);
    reader.read("seed", &mut seed)?;
    reader.finish()?;
    let seed = common.finish_seed(seed);

    ensure_out_dir(&common.out)?;
    let (bytes, outcome) = read_corpus(input, common.strict)?;

    let mut flat = common.flat.clone();
    flat.insert("seed".into(), seed.to_string());
    let mut run = RunManifest::start("curate", seed, flat);
    run.add_input_bytes(input, &bytes);

    let mut kept = String::new();
    for record in &outcome.records {
        kept.push_str(&record_to_json_line(record));
        kept.push('\n');
    }
    write_output(&mut run, &common.out, KEPT_FILE, kept.as_bytes())?;

    let mut stats = Vec::new();
    write_stats_csv(&outcome.stats, &mut stats)?;
    write_output(&mut run, &common.out, STATS_FILE, &stats)?;

    let corpus = CorpusManifest::from_outcome(
        vec![input.display().to_string()],
        sha256_hex(&bytes),
        &outcome,
    );
    write_manifest(&corpus, &common.out.join(CORPUS_MANIFEST_FILE))?;
    run.record_output(CORPUS_MANIFEST_FILE);

    println!(
        "curated {} lines: kept {}, rejected {}",
        outcome.lines,
        outcome.records.len(),
        outcome.rejections.len()
    );
    run.finish_and_write(&common.out)
}
