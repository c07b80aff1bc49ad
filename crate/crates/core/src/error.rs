use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch, with the offending location.
    #[error("dimension error in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: String,
        actual: String,
    },

    /// A caller violated an operation's precondition.
    #[error("contract violated: {0}")]
    Contract(String),

    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid placement: {0}")]
    Placement(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid topology: {0}")]
    Topology(String),

    /// Training produced a NaN/Inf loss.
    #[error("training diverged at {location}: loss = {loss}")]
    Diverged { location: String, loss: f64 },

    #[error("target accuracy {target:.4} is unreachable (achievable range {min:.4}..={max:.4})")]
    Infeasible { target: f64, min: f64, max: f64 },

    #[error("exhaustive search refused: depth {depth} exceeds limit {limit}")]
    SearchTooLarge { depth: usize, limit: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
