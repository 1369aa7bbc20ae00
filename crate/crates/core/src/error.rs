use thiserror::Error;

/// Errors raised by the fusion library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, expected {expected}, found {found}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("scale factor must be >= 1, got {0}")]
    InvalidScale(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0}: non-finite value encountered")]
    NonFinite(&'static str),

    #[error("bisection oracle did not converge after {iterations} iterations (residual {residual:e})")]
    OracleNoConvergence { iterations: usize, residual: f64 },

    #[error("support/weights inconsistency: {0}")]
    SupportMismatch(String),

    #[error("rejection sampling exhausted after {0} attempts")]
    SamplingExhausted(usize),

    #[error("infeasible quality profile: {0}")]
    InfeasibleProfile(String),

    #[error("training diverged: {0}")]
    TrainingDivergence(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("missing forward record: {0}")]
    MissingForward(&'static str),

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(
    op: &'static str,
    expected: impl Into<String>,
    found: impl Into<String>,
) -> Error {
    Error::DimensionMismatch {
        op,
        expected: expected.into(),
        found: found.into(),
    }
}
