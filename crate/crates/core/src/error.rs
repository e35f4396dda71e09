use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("longitudinal velocity {v_x} m/s is below the slip-angle floor {floor} m/s")]
    VelocityFloor { v_x: f64, floor: f64 },

    #[error("{what}: expected length {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid value for {field}: {reason}")]
    InvalidValue { field: String, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{path}: CSV schema mismatch: {reason}")]
    CsvSchema { path: PathBuf, reason: String },

    #[error("{path}: row {row}: field `{field}` is NaN or infinite")]
    CsvNan {
        path: PathBuf,
        row: usize,
        field: &'static str,
    },

    #[error("{path}: row {row}: timestamp {t} does not increase within session {session}")]
    CsvNonMonotone {
        path: PathBuf,
        row: usize,
        t: f64,
        session: u32,
    },

    #[error("dataset too small: {0}")]
    InsufficientData(String),

    #[error("data generation aborted at t = {t:.3} s: {reason}")]
    Generation { t: f64, reason: String },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },

    #[error("race aborted at t = {t:.3} s: {reason}")]
    RaceAbort { t: f64, reason: String },

    #[error("unsupported checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidValue {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
