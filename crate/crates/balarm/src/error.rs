//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, fitting, and I/O.
#[derive(Debug, Error)]
pub enum BalarmError {
    /// Structural hyperparameters violate an invariant (G, K, H, P, dimensions).
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    /// Parameter values violate an invariant (non-finite entries, bad mixing weights).
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    /// Data violates an invariant (non-binary values, timestamp gaps, bad edge map).
    #[error("invalid panel: {0}")]
    InvalidPanel(String),

    /// Sizes of two inputs that must agree do not.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A text input could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// An iterative procedure hit its iteration cap without meeting its tolerance.
    #[error("did not converge: {0}")]
    NonConvergence(String),

    /// The weighted normal system is singular, which signals separation.
    #[error("singular system: {0}")]
    Singular(String),

    /// Not enough usable data for the requested computation.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A file has the wrong format or version.
    #[error("format error: {0}")]
    Format(String),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, BalarmError>;
