use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid bounds in dimension {dim}: [{lo}, {hi}]")]
    InvalidBounds { dim: usize, lo: f64, hi: f64 },
    #[error("too few points: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("too few samples for rank-sum test: need at least 3 per group, got {0} and {1}")]
    TooFewSamples(usize, usize),
    #[error("decision vector has dimension {got}, expected {expected}")]
    DimensionError { expected: usize, got: usize },
    #[error("feasibility calibration failed after {0} resamples")]
    FeasibilityCalibrationFailed(usize),
    #[error("initial design of {n_init} points exceeds the evaluation budget {fe_max}")]
    BudgetExhaustedAtInit { n_init: usize, fe_max: usize },
    #[error("set must be nonempty: {0}")]
    EmptySet(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("truth values have zero variance")]
    ZeroVariance,
    #[error("no reference front available for {0}")]
    UnsupportedFamily(String),
    #[error("experience store version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("experience store field `{field}`: {reason}")]
    SchemaError { field: String, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical core rather than of input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::FeasibilityCalibrationFailed(_)
                | Error::TooFewPoints { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
