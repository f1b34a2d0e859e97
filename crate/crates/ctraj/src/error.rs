use thiserror::Error;

use crate::solver::SolveReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("descriptor mismatch: expected {expected}, got {got}")]
    DescriptorMismatch { expected: String, got: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time {t} outside valid domain [{start}, {end})")]
    OutOfDomain { t: f64, start: f64, end: f64 },

    #[error("derivative order {0} not supported (max 2)")]
    UnsupportedDerivative(u32),

    #[error("unsupported factor: {0}")]
    UnsupportedFactor(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("rank-deficient normal equations: {0}")]
    RankDeficient(String),

    #[error("optimization did not converge: {reason}")]
    NoConvergence {
        reason: String,
        report: Box<SolveReport>,
    },

    #[error("config error: field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }
}
