use std::path::PathBuf;

use icl_core::LabError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{origin}:{line}:{column}: at `{key}`: {message}")]
    Parse {
        origin: String,
        key: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unknown preset `{name}` (available: {available})")]
    UnknownPreset { name: String, available: String },

    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),

    #[error("the zero_mean suite needs all task means at zero, but task {task} has |mu| = {norm:e}")]
    MeansNotZero { task: usize, norm: f64 },

    #[error("{gap} at n = {n} is {value:e}; gaps at or below 1e-14 cannot be fitted on a log scale")]
    DegenerateGaps { gap: &'static str, n: usize, value: f64 },

    #[error(transparent)]
    Lab(#[from] LabError),

    #[error("CSV output failed: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;
