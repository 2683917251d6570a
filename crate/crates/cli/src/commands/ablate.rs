//! `protext ablate` — trains one run per sweep setting and aggregates a
//! summary table.
//!
//! The sweep covers a grid over the segment-reconstruction weight (its
//! language-modeling partner always set to the complement) and a grid over
//! the alignment sparsification threshold. All settings share one seed and
//! therefore one batch stream, so trajectories are directly comparable.
//! Each setting trains independently and single-threaded; a failed setting
//! is recorded in the summary and the sweep continues.
//!
//! The per-setting `delta_std` column is the interference metric: the
//! (population) standard deviation of step-to-step total-loss deltas over a
//! trailing window. The deliberately unconstrained setting weighting both
//! segment losses at 1 runs only when unconstrained weights are permitted.

use std::fmt::Write as _;
use std::path::Path;

use protext_core::curation::filter_for_pretraining;
use protext_core::objectives::{LossReport, Trainer, TrainerConfig};
use protext_core::record::ProteinRecord;
use protext_core::sampler::{
    build_distribution, ClusterIndex, SamplingDistribution, SamplingParams,
};

use crate::config::{apply_trainer_keys, trainer_to_flat, FlatConfig};
use crate::error::CliError;
use crate::manifest::{ensure_out_dir, write_output, RunManifest};

use super::train::{drive, trajectory_csv, LOSS_FILE};
use super::{read_corpus, Common};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_HEADER: &str = "setting,lambda1,lambda2,theta,steps,final_total,delta_std,\
     degenerate_rows,masked_weights,pda_skipped,skipped_short,error";

pub const DEFAULT_LAMBDA1_GRID: [f64; 3] = [0.3, 0.5, 0.7];
pub const DEFAULT_THETA_GRID: [f64; 3] = [0.1, 0.3, 0.5];
pub const DEFAULT_STEPS: u64 = 100;
pub const DEFAULT_WINDOW: usize = 50;

/// One sweep entry: a label naming its output directory and the full
/// trainer configuration it runs with.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSetting {
    pub label: String,
    pub config: TrainerConfig,
}

#[derive(Debug, Clone, PartialEq)]
struct Sweep {
    base: TrainerConfig,
    lambda1_grid: Vec<f64>,
    theta_grid: Vec<f64>,
    steps: u64,
    window: usize,
    include_unweighted: bool,
}

impl Sweep {
    fn settings(&self) -> Result<Vec<SweepSetting>, CliError> {
        let mut settings = Vec::new();
        for &lambda1 in &self.lambda1_grid {
            let mut config = self.base.clone();
            config.loss.lambda1 = lambda1;
            config.loss.lambda2 = 1.0 - lambda1;
            settings.push(SweepSetting { label: format!("lambda1_{lambda1}"), config });
        }
        for &theta in &self.theta_grid {
            let mut config = self.base.clone();
            config.loss.theta = theta;
            settings.push(SweepSetting { label: format!("theta_{theta}"), config });
        }
        if self.include_unweighted {
            if !self.base.allow_unconstrained {
                return Err(CliError::Config(
                    "the unweighted setting puts weight 1 on both segment losses and \
                     requires --allow-unconstrained"
                        .into(),
                ));
            }
            let mut config = self.base.clone();
            config.loss.lambda1 = 1.0;
            config.loss.lambda2 = 1.0;
            settings.push(SweepSetting { label: "unweighted".into(), config });
        }
        Ok(settings)
    }

    fn to_flat(&self, seed: u64) -> FlatConfig {
        let join = |grid: &[f64]| {
            grid.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
        };
        let mut flat = trainer_to_flat(&self.base);
        flat.insert("seed".into(), seed.to_string());
        flat.insert("ablate.lambda1".into(), join(&self.lambda1_grid));
        flat.insert("ablate.theta".into(), join(&self.theta_grid));
        flat.insert("ablate.steps".into(), self.steps.to_string());
        flat.insert("ablate.window".into(), self.window.to_string());
        flat.insert("ablate.include_unweighted".into(), self.include_unweighted.to_string());
        flat
    }
}

/// Population standard deviation of step-to-step total-loss deltas over the
/// trailing `window` deltas. `None` below two steps.
pub fn trailing_delta_std(totals: &[f64], window: usize) -> Option<f64> {
    if totals.len() < 2 || window == 0 {
        return None;
    }
    let deltas: Vec<f64> = totals.windows(2).map(|w| w[1] - w[0]).collect();
    let tail = &deltas[deltas.len().saturating_sub(window)..];
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    let variance = tail.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / tail.len() as f64;
    Some(variance.sqrt())
}

struct SettingOutcome {
    setting: SweepSetting,
    reports: Vec<LossReport>,
    error: Option<String>,
}

fn run_setting(
    setting: &SweepSetting,
    records: &[ProteinRecord],
    index: &ClusterIndex,
    distribution: &SamplingDistribution,
    steps: u64,
) -> Result<Vec<LossReport>, CliError> {
    let mut trainer = Trainer::new(setting.config.clone())?;
    drive(&mut trainer, records, index, distribution, steps)
}

fn summary_row(outcome: &SettingOutcome, window: usize) -> String {
    let loss = &outcome.setting.config.loss;
    let mut row = format!(
        "{},{},{},{},{}",
        outcome.setting.label,
        loss.lambda1,
        loss.lambda2,
        loss.theta,
        outcome.reports.len()
    );
    match outcome.reports.last() {
        Some(last) => {
            let totals: Vec<f64> = outcome.reports.iter().map(|r| r.total).collect();
            let delta_std =
                trailing_delta_std(&totals, window).map(|s| s.to_string()).unwrap_or_default();
            let degenerate: u64 = outcome.reports.iter().map(|r| r.degenerate_rows).sum();
            let masked: u64 = outcome.reports.iter().map(|r| r.masked_weights).sum();
            let pda_skipped: u64 = outcome.reports.iter().map(|r| r.pda_skipped).sum();
            let skipped_short: u64 = outcome.reports.iter().map(|r| r.skipped_short).sum();
            let _ = write!(
                row,
                ",{},{delta_std},{degenerate},{masked},{pda_skipped},{skipped_short},",
                last.total
            );
        }
        None => row.push_str(",,,,,,"),
    }
    if let Some(error) = &outcome.error {
        row.push_str(&error.replace([',', '\n'], ";"));
    }
    row
}

pub fn run(common: &Common, input: &Path) -> Result<(), CliError> {
    let mut base = TrainerConfig::default();
    let sweep = {
        let mut lambda1_grid = DEFAULT_LAMBDA1_GRID.to_vec();
        let mut theta_grid = DEFAULT_THETA_GRID.to_vec();
        let mut steps = DEFAULT_STEPS;
        let mut window = DEFAULT_WINDOW;
        let mut include_unweighted = false;
        let mut reader = apply_trainer_keys(&mut base, &common.flat)?;
        reader.read_list("ablate.lambda1", &mut lambda1_grid)?;
        reader.read_list("ablate.theta", &mut theta_grid)?;
        reader.read("ablate.steps", &mut steps)?;
        reader.read("ablate.window", &mut window)?;
        reader.read("ablate.include_unweighted", &mut include_unweighted)?;
        reader.finish()?;
        base.seed = common.finish_seed(base.seed);
        base.allow_unconstrained = base.allow_unconstrained || common.allow_unconstrained;
        Sweep { base, lambda1_grid, theta_grid, steps, window, include_unweighted }
    };
    let settings = sweep.settings()?;

    ensure_out_dir(&common.out)?;
    let (bytes, outcome) = read_corpus(input, common.strict)?;
    let (records, _) = filter_for_pretraining(outcome.records);

    let mut run = RunManifest::start("ablate", sweep.base.seed, sweep.to_flat(sweep.base.seed));
    run.add_input_bytes(input, &bytes);

    let index = ClusterIndex::build(&records);
    let distribution = build_distribution(&index.stats(), SamplingParams::default())?;
    let mut summary = String::from(SUMMARY_HEADER);
    summary.push('\n');
    for setting in settings {
        let outcome = match run_setting(&setting, &records, &index, &distribution, sweep.steps) {
            Ok(reports) => SettingOutcome { setting, reports, error: None },
            Err(error) => {
                SettingOutcome { setting, reports: Vec::new(), error: Some(error.to_string()) }
            }
        };
        let subdir = common.out.join(&outcome.setting.label);
        ensure_out_dir(&subdir)?;
        let csv = trajectory_csv(&outcome.reports);
        let name = format!("{}/{}", outcome.setting.label, LOSS_FILE);
        std::fs::write(subdir.join(LOSS_FILE), csv.as_bytes())
            .map_err(|e| CliError::Io(format!("output {name}: {e}")))?;
        run.record_output(&name);
        match (&outcome.error, outcome.reports.last()) {
            (Some(error), _) => println!("setting {}: FAILED ({error})", outcome.setting.label),
            (None, Some(last)) => {
                println!("setting {}: final total {}", outcome.setting.label, last.total)
            }
            (None, None) => println!("setting {}: no steps taken", outcome.setting.label),
        }
        summary.push_str(&summary_row(&outcome, sweep.window));
        summary.push('\n');
    }
    write_output(&mut run, &common.out, SUMMARY_FILE, summary.as_bytes())?;
    run.finish_and_write(&common.out)
}
