use thiserror::Error;

/// Crate-wide error type. Variants are grouped by failure class so callers
/// (in particular the CLI) can map them to distinct exit codes.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A POMDP spec, config, or table failed validation.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// A run configuration is inconsistent or unusable.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Joint state enumeration exceeded the configured cap.
    #[error("capacity exceeded: {what} needs {needed} entries, cap is {cap}")]
    CapacityExceeded {
        what: String,
        needed: usize,
        cap: usize,
    },

    /// Mismatched tensor or table dimensions.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An iterative solver failed to reach its tolerance.
    #[error("solver did not converge: {0}")]
    NoConvergence(String),

    /// Non-finite numbers showed up where they must not (gradients, losses).
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A data file failed to parse; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A buffer or file lacks fields required by the requested mode.
    #[error("missing data: {0}")]
    MissingData(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
