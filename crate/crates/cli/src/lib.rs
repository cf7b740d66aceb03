//! Experiment runner: JSON configs in, CSV tables out.
//!
//! Loss rows go to the requested output file. Pass/fail checks go to a
//! sibling file with the `.checks.csv` suffix.

pub mod config;
pub mod error;
pub mod fit;
pub mod report;
pub mod suites;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

pub use config::{load_config, preset, ExperimentConfig, Suite};
pub use error::{CliError, Result};
pub use report::{CheckRow, LandscapeRow, RunMetadata, SuiteOutput};
pub use suites::{run_experiment, run_suite};

/// Environment variable bounding the number of worker threads.
pub const THREADS_ENV: &str = "ICL_LAB_THREADS";

/// Sizes the global worker pool from [`THREADS_ENV`] when it is set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| CliError::InvalidConfig(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::InvalidConfig(format!("cannot size the worker pool: {e}")))
}

/// `results.csv` becomes `results.checks.csv`.
pub fn checks_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    output.with_file_name(format!("{stem}.checks.csv"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| CliError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    File::create(path).map(BufWriter::new).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the loss table to `output` and the checks next to it; returns the checks path.
pub fn write_outputs(output: &Path, meta: RunMetadata, results: &SuiteOutput) -> Result<PathBuf> {
    report::write_landscape(create(output)?, meta, &results.rows)?;
    let checks = checks_path(output);
    report::write_checks(create(&checks)?, meta, &results.checks)?;
    Ok(checks)
}

/// Metadata line for a config.
pub fn metadata(config: &ExperimentConfig) -> RunMetadata {
    RunMetadata {
        mc_samples: config.mc_samples,
        seed: config.seed,
    }
}

/// Machine-readable summary of failed checks.
pub fn failure_summary(results: &SuiteOutput) -> serde_json::Value {
    serde_json::json!({
        "status": "failed",
        "failed_checks": results.failures().collect::<Vec<_>>(),
    })
}
