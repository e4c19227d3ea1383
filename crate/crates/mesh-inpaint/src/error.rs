//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed input file; `line` is 1-based (or a byte offset for binary formats).
    #[error("{path}:{line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },

    #[error("invalid mesh data: {0}")]
    Data(String),

    #[error("degenerate face {face}: {message}")]
    DegenerateFace { face: usize, message: String },

    #[error("mesh structure error: {0}")]
    Structure(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("simplification stopped at {achieved} vertices before reaching target {target}: no legal edge collapse left")]
    Simplify { achieved: usize, target: usize },

    #[error("loss undefined: {0}")]
    UndefinedLoss(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),
}
