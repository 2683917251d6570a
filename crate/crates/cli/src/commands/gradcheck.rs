//! `protext gradcheck` — verifies the analytic gradient of every loss
//! against central finite differences on a small frozen model, printing one
//! verdict line per loss and writing the full report as JSON. A failed
//! check exits with the internal-invariant code. The `gradcheck.fault_gain`
//! key is a verification hook: values other than 1 deliberately corrupt one
//! backward rule to prove the harness catches broken gradients.

use protext_core::gradcheck::{check_all, CheckSettings};

use crate::config::{apply_gradcheck_keys, gradcheck_to_flat};
use crate::error::CliError;
use crate::manifest::{ensure_out_dir, write_output, RunManifest};

use super::{Common, DEFAULT_SEED};

pub const REPORT_FILE: &str = "gradcheck_report.json";

pub fn run(common: &Common) -> Result<(), CliError> {
    let mut settings = CheckSettings::default();
    let mut seed = DEFAULT_SEED;
    let mut reader = apply_gradcheck_keys(&mut settings, &common.flat)?;
    reader.read("seed", &mut seed)?;
    reader.finish()?;
    let seed = common.finish_seed(seed);

    ensure_out_dir(&common.out)?;
    let mut flat = gradcheck_to_flat(&settings);
    flat.insert("seed".into(), seed.to_string());
    let mut run = RunManifest::start("gradcheck", seed, flat);

    let report = check_all(seed, &settings)?;
    print!("{}", report.render());

    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Internal(format!("report serialization: {e}")))?;
    write_output(&mut run, &common.out, REPORT_FILE, (json + "\n").as_bytes())?;
    run.finish_and_write(&common.out)?;

    if report.all_passed {
        Ok(())
    } else {
        Err(CliError::Internal(
            "gradient check failed: analytic and finite-difference gradients disagree".into(),
        ))
    }
}
