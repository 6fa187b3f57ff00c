use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("covariance is singular")]
    SingularCovariance,
    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),
    #[error("insufficient data: need at least {needed} rows, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("zero variance in dimension {0}")]
    ZeroVariance(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("training diverged{}", .epoch.map(|e| format!(" at epoch {e}")).unwrap_or_default())]
    TrainingDiverged { epoch: Option<usize> },
    #[error("degenerate latent dump: {0}")]
    DegenerateDump(String),
    #[error("factor {0} has zero variance")]
    InvalidFactor(usize),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
