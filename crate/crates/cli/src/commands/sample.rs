//! `protext sample` — draws cluster-balanced record indices from a corpus.
//!
//! The corpus is filtered the same way pre-training filters it (reliable
//! annotations only), the cluster distribution is built over what remains,
//! and `k` indices are drawn with replacement. Output lists the draw
//! number, the index into the kept record list, and the entry name.

use std::fmt::Write as _;
use std::path::Path;

use protext_core::curation::filter_for_pretraining;
use protext_core::rng::SeededRng;
use protext_core::sampler::{build_distribution, sample_batch, ClusterIndex, SamplingParams};

use crate::config::{apply_sampling_keys, FlatConfig};
use crate::error::CliError;
use crate::manifest::{ensure_out_dir, write_output, RunManifest};

use super::{read_corpus, Common, DEFAULT_SEED};

pub const SAMPLES_FILE: &str = "samples.csv";
pub const DEFAULT_K: usize = 16;

fn sampling_flat(seed: u64, k: usize, params: &SamplingParams) -> FlatConfig {
    let mut flat = FlatConfig::new();
    flat.insert("seed".into(), seed.to_string());
    flat.insert("sample.k".into(), k.to_string());
    flat.insert(
        "sample.confidence_exponent".into(),
        params.confidence_exponent.to_string(),
    );
    flat.insert("sample.coverage_power".into(), params.coverage_power.to_string());
    flat
}

pub fn run(common: &Common, input: &Path, k_flag: Option<usize>) -> Result<(), CliError> {
    let mut params = SamplingParams::default();
    let mut seed = DEFAULT_SEED;
    let mut k = DEFAULT_K;
    let mut reader = apply_sampling_keys(&mut params, &common.flat)?;
    reader.read("seed", &mut seed)?;
    reader.read("sample.k", &mut k)?;
    reader.finish()?;
    let seed = common.finish_seed(seed);
    let k = k_flag.unwrap_or(k);

    ensure_out_dir(&common.out)?;
    let (bytes, outcome) = read_corpus(input, common.strict)?;
    let (records, _) = filter_for_pretraining(outcome.records);

    let mut run = RunManifest::start("sample", seed, sampling_flat(seed, k, &params));
    run.add_input_bytes(input, &bytes);

    let index = ClusterIndex::build(&records);
    let mut out = String::from("draw,index,entry_name\n");
    if k > 0 {
        let distribution = build_distribution(&index.stats(), params)?;
        let mut rng = SeededRng::new(seed);
        let ids = sample_batch(&distribution, &index, &mut rng, k)?;
        for (draw, id) in ids.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", draw, id, records[*id].entry_name());
        }
    }
    print!("{out}");
    write_output(&mut run, &common.out, SAMPLES_FILE, out.as_bytes())?;
    run.finish_and_write(&common.out)
}
