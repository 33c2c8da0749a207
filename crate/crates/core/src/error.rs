use thiserror::Error;

#[derive(Debug, Error)]
pub enum CdlfError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("diffusion step {n} out of range 1..={max}")]
    StepOutOfRange { n: usize, max: usize },

    #[error("stability margin violated: rho = {rho} >= 1")]
    MarginViolated { rho: f64 },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, CdlfError>;

pub(crate) fn dim_err(context: &'static str, expected: impl ToString, got: impl ToString) -> CdlfError {
    CdlfError::Dimension {
        context,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
