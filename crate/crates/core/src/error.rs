use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum EtaError {
    #[error("grid size must be at least 1, got {0}")]
    EmptyGrid(u32),

    #[error("invalid segment {0}")]
    InvalidSegment(String),

    #[error("invalid route: {0}")]
    InvalidRoute(String),

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("segment {segment} has degree 0 in the segment graph")]
    ZeroDegree { segment: usize },

    #[error("covariance matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("covariance matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("covariance matrix is singular: {0}")]
    Singular(String),

    #[error("covariance block of trip {trip} is not positive definite")]
    SingularTripBlock { trip: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("weight rule {0} needs a covariance model")]
    MissingCovariance(&'static str),

    #[error("could not draw distinct origin and destination after {0} attempts")]
    RetryCapExceeded(u64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EtaError>;
