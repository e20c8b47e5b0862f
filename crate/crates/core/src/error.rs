use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("edge weight matrix is not strictly lower triangular: entry ({row}, {col}) = {value}")]
    NotLowerTriangular { row: usize, col: usize, value: f64 },

    #[error("exogenous variance of node {node} is negative ({value})")]
    NegativeVariance { node: usize, value: f64 },

    #[error("exogenous variance of node {node} is zero outside an intervention")]
    DegenerateVariance { node: usize },

    #[error("bad dimension: {0}")]
    BadDimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("node {node} is out of range for a model with {p} nodes")]
    NodeOutOfRange { node: usize, p: usize },

    #[error("changing edge {origin} -> {target} would create a cycle")]
    WouldCreateCycle { target: usize, origin: usize },

    #[error("graph contains a directed cycle")]
    Cyclic,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("observation was taken under arm {got} but the detector expects arm {expected}")]
    ArmMismatch { expected: usize, got: usize },

    #[error("covariance matrix is singular or not positive semidefinite")]
    SingularCovariance,

    #[error("{0}")]
    NonPositiveInput(String),

    #[error("bad exploration budget: need 1 <= q < w, got q = {q}, w = {w}")]
    BadBudget { q: usize, w: usize },

    #[error("invalid detector configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown preset `{name}`; valid presets: {valid}")]
    UnknownPreset { name: String, valid: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Config(String),

    #[error("verification failed: {0}")]
    VerificationFailed(String),

    #[error("thread pool: {0}")]
    ThreadPool(String),
}

impl Error {
    /// Whether the error stems from user-supplied configuration rather than a
    /// failure while running.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::NotLowerTriangular { .. }
                | Error::NegativeVariance { .. }
                | Error::DegenerateVariance { .. }
                | Error::BadDimension(_)
                | Error::NonFinite(_)
                | Error::NodeOutOfRange { .. }
                | Error::WouldCreateCycle { .. }
                | Error::Cyclic
                | Error::NonPositiveInput(_)
                | Error::BadBudget { .. }
                | Error::InvalidConfig(_)
                | Error::UnknownPreset { .. }
                | Error::Config(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
