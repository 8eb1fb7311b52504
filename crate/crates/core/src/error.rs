use thiserror::Error;

/// Errors raised by the optimizer, environment and audit layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FoamError {
    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("allocation is not on the simplex (sum = {sum}, min = {min})")]
    OffSimplex { sum: f64, min: f64 },

    #[error("group-rate EMA is not warm-started (mu_hat[{group}] = {value})")]
    EmaNotWarm { group: usize, value: f64 },

    #[error("degenerate state pair at index {0}: states coincide")]
    DegeneratePair(usize),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("conjugate gradient did not converge after {iterations} iterations (residual {residual:e})")]
    CgNonConvergence { iterations: usize, residual: f64 },

    #[error("dual Newton iteration did not converge after {iterations} steps (kkt residual {residual:e})")]
    DualNonConvergence { iterations: usize, residual: f64 },

    #[error("batch too short for autocorrelation estimate: {len} samples, need at least {needed}")]
    BatchTooShort { len: usize, needed: usize },

    #[error("gains are unstable: {0}")]
    UnstableGains(String),

    #[error("unknown variant `{0}`")]
    UnknownVariant(String),

    #[error("energy evaluation failed: {0}")]
    EnergyEvaluation(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("serialization error: {0}")]
    Serialization(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("iteration {iteration}: {source}")]
    AtIteration { iteration: usize, source: Box<FoamError> },
}

impl FoamError {
    pub fn at_iteration(self, iteration: usize) -> Self {
        FoamError::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }
}

impl From<std::io::Error> for FoamError {
    fn from(e: std::io::Error) -> Self {
        FoamError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for FoamError {
    fn from(e: serde_json::Error) -> Self {
        FoamError::Serialization(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, FoamError>;
