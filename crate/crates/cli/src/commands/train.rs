//! `protext train` — pre-trains on a curated corpus, writing the per-step
//! loss trajectory, a resumable checkpoint, and the run manifest.
//!
//! Batches are drawn cluster-balanced (inverse-cubed confidence ×
//! root coverage, the same scheme `protext sample` exposes, at its default
//! exponents). The indices for step `s` come from a generator derived from
//! the seed and `s` alone, so `--resume` continues the exact batch stream
//! of the uninterrupted run and reproduces its trajectory bitwise.

use std::path::Path;

use protext_core::curation::filter_for_pretraining;
use protext_core::objectives::{LossReport, Trainer, TrainerConfig};
use protext_core::record::ProteinRecord;
use protext_core::rng::SeededRng;
use protext_core::sampler::{
    build_distribution, sample_batch, ClusterIndex, SamplingDistribution, SamplingParams,
};

use crate::config::{apply_trainer_keys, trainer_to_flat};
use crate::error::CliError;
use crate::manifest::{ensure_out_dir, write_output, RunManifest};

use super::{collect_batch, read_corpus, Common, BATCH_STREAM_SALT};

pub const LOSS_FILE: &str = "loss.csv";
pub const MODEL_FILE: &str = "model.ckpt";
pub const DEFAULT_STEPS: u64 = 100;

/// Runs training steps until `trainer` reaches `target_steps`, returning
/// one report per step taken. Shared with the ablation sweep.
pub fn drive(
    trainer: &mut Trainer,
    records: &[ProteinRecord],
    index: &ClusterIndex,
    distribution: &SamplingDistribution,
    target_steps: u64,
) -> Result<Vec<LossReport>, CliError> {
    let seed = trainer.config().seed;
    let batch_size = trainer.config().batch_size;
    let mut reports = Vec::new();
    while trainer.step_count() < target_steps {
        let mut batch_rng = SeededRng::for_worker(seed ^ BATCH_STREAM_SALT, trainer.step_count());
        let ids = sample_batch(distribution, index, &mut batch_rng, batch_size)?;
        let batch = collect_batch(records, &ids);
        reports.push(trainer.train_step(&batch)?);
    }
    Ok(reports)
}

pub fn trajectory_csv(reports: &[LossReport]) -> String {
    let mut csv = String::from(LossReport::CSV_HEADER);
    csv.push('\n');
    for report in reports {
        csv.push_str(&report.csv_row());
        csv.push('\n');
    }
    csv
}

pub fn run(
    common: &Common,
    input: &Path,
    steps_flag: Option<u64>,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let mut steps = DEFAULT_STEPS;
    let mut trainer = match resume {
        Some(checkpoint) => {
            if common.config_path.is_some() || common.seed_flag.is_some() {
                return Err(CliError::Config(
                    "--resume restores the checkpoint's configuration; \
                     --config and --seed cannot be combined with it"
                        .into(),
                ));
            }
            Trainer::load(checkpoint)?
        }
        None => {
            let mut config = TrainerConfig::default();
            let mut reader = apply_trainer_keys(&mut config, &common.flat)?;
            reader.read("steps", &mut steps)?;
            reader.finish()?;
            config.seed = common.finish_seed(config.seed);
            config.allow_unconstrained = config.allow_unconstrained || common.allow_unconstrained;
            Trainer::new(config)?
        }
    };
    if let Some(flag) = steps_flag {
        steps = flag;
    }
    let config = trainer.config().clone();

    ensure_out_dir(&common.out)?;
    let (bytes, outcome) = read_corpus(input, common.strict)?;
    let (records, _) = filter_for_pretraining(outcome.records);

    let mut flat = trainer_to_flat(&config);
    flat.insert("steps".into(), steps.to_string());
    let mut run = RunManifest::start("train", config.seed, flat);
    run.add_input_bytes(input, &bytes);
    if let Some(checkpoint) = resume {
        run.add_input(checkpoint)?;
    }

    let index = ClusterIndex::build(&records);
    let distribution = build_distribution(&index.stats(), SamplingParams::default())?;
    let start = trainer.step_count();
    let reports = drive(&mut trainer, &records, &index, &distribution, steps)?;

    write_output(&mut run, &common.out, LOSS_FILE, trajectory_csv(&reports).as_bytes())?;
    trainer.save(&common.out.join(MODEL_FILE))?;
    run.record_output(MODEL_FILE);

    match reports.last() {
        Some(last) => println!(
            "trained steps {}..={} (total loss {} at step {})",
            start + 1,
            trainer.step_count(),
            last.total,
            last.step
        ),
        None => println!("checkpoint already at step {}; nothing to train", start),
    }
    run.finish_and_write(&common.out)
}
