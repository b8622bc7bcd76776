use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped into three classes used by the CLI for exit codes:
/// configuration problems, I/O problems, and numeric failures encountered
/// during estimation (non-PD matrices, weight degeneracy, non-finite values).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("{what} is not positive definite")]
    NotPositiveDefinite { what: String },

    /// A potential produced a natural-parameter sum whose precision is not
    /// positive definite; the step must be aborted rather than clamped.
    #[error("degenerate backward kernel: {what}")]
    DegenerateKernel { what: String },

    /// All importance weights underflowed to zero (or were non-finite).
    #[error("degenerate importance weights at t={t}")]
    DegenerateWeights { t: usize },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Coarse error class: "config", "io" or "numeric".
    pub fn class(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::Json(_) | Error::Dimension { .. } => "config",
            Error::Io(_) | Error::Checkpoint(_) => "io",
            Error::NotPositiveDefinite { .. }
            | Error::DegenerateKernel { .. }
            | Error::DegenerateWeights { .. }
            | Error::NonFinite { .. } => "numeric",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
