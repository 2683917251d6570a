//! `protext stats` — reports a corpus's confidence-label marginals on
//! stdout and writes them, together with the full confidence × coverage
//! count table, into the output directory.

use std::fmt::Write as _;
use std::path::Path;

use protext_core::curation::{write_stats_csv, ClusterKey, ClusterStats};
use protext_core::record::CoverageLevel;

use crate::config::ConfigReader;
use crate::error::CliError;
use crate::manifest::{ensure_out_dir, write_output, RunManifest};

use super::{read_corpus, Common, DEFAULT_SEED};

pub const MARGINALS_FILE: &str = "marginals.csv";
pub const STATS_FILE: &str = "stats.csv";

/// Confidence marginals as CSV: one row per label 1..=5.
pub fn render_marginals(stats: &ClusterStats) -> String {
    let total = stats.total();
    let mut out = String::from("confidence,count,fraction\n");
    for confidence in 1..=5u8 {
        let count: u64 = (1..=4u8)
            .filter_map(CoverageLevel::from_present_count)
            .map(|coverage| stats.count(&ClusterKey::new(confidence, coverage)))
            .sum();
        let fraction = if total == 0 { 0.0 } else { count as f64 / total as f64 };
        let _ = writeln!(out, "{confidence},{count},{fraction}");
    }
    out
}

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
    let mut run = RunManifest::start("stats", seed, flat);
    run.add_input_bytes(input, &bytes);

    let marginals = render_marginals(&outcome.stats);
    print!("{marginals}");
    write_output(&mut run, &common.out, MARGINALS_FILE, marginals.as_bytes())?;

    let mut table = Vec::new();
    write_stats_csv(&outcome.stats, &mut table)?;
    write_output(&mut run, &common.out, STATS_FILE, &table)?;

    run.finish_and_write(&common.out)
}
