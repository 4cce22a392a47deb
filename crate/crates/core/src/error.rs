use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no connected graph with n={n}, radius={radius} after {attempts} attempts")]
    RetryExhausted { n: usize, radius: f64, attempts: usize },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("degenerate spectrum: sigma2 = {sigma2} leaves no spectral gap")]
    DegenerateSpectrum { sigma2: f64 },

    #[error("index {index} out of range for {bits}-bit grid at coordinate {coord}")]
    IndexOutOfRange { coord: usize, index: u64, bits: u32 },

    #[error("bit string has {actual} bits, expected {expected}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("reference solver made no progress within {iterations} iterations")]
    NoProgress { iterations: usize },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid value for `{field}`: {reason}")]
    Validation { field: &'static str, reason: String },

    #[error("failed to parse {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Validation {
            field,
            reason: reason.into(),
        }
    }
}
