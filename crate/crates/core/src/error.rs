use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty control arm")]
    EmptyControlArm,
    #[error("empty treated arm")]
    EmptyTreatedArm,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("covariate dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("inconsistent unit: {0}")]
    InconsistentUnit(String),
    /// `r = floor(n0 / n1)` would be zero; the caller should fall back to CCI.
    #[error("control arm smaller than treated arm (n0 = {n0}, n1 = {n1}); synthetic calibration undefined, fall back to CCI")]
    ArmImbalance { n0: usize, n1: usize },
    #[error("arm {0} was not calibrated")]
    ArmNotCalibrated(u8),
    #[error("row {row}: {msg}")]
    Row { row: usize, msg: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("unexpected column `{0}`")]
    UnexpectedColumn(String),
    #[error("no trials")]
    NoTrials,
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data rather than bad usage.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::InvalidParameter(_) | Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
