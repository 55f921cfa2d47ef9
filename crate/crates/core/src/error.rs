use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum CalibError {
    /// Malformed numeric input (non-finite values, wrong lengths, bad probabilities).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An argument outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A metric that cannot be computed for the given sample (e.g. AUROC with one class).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    /// Not enough wrongly predicted records inside a wrongness band.
    #[error("band [{low}, {high}) has {available} wrong records, {needed} requested")]
    Shortfall {
        low: f64,
        high: f64,
        needed: usize,
        available: usize,
    },

    /// A file line or field failed to parse or validate.
    #[error("{path}: line {line}: field `{field}`: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        field: String,
        reason: String,
    },

    #[error("unsupported parameter file version {0}")]
    UnsupportedVersion(u64),

    #[error("parameter file field `{field}`: {reason}")]
    ParamsShape { field: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CalibError>;
