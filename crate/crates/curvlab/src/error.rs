//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by curvlab operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between containers.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A matrix violated a symmetry requirement.
    #[error("matrix not symmetric: max |a_ij - a_ji| = {asymmetry:.3e}, allowed {allowed:.3e}")]
    NotSymmetric { asymmetry: f64, allowed: f64 },

    /// A non-finite value appeared during a computation.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// An argument was outside its admissible range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A problem size exceeded a documented cap.
    #[error("dimension {dim} exceeds cap {cap}: {hint}")]
    DimensionCap {
        dim: usize,
        cap: usize,
        hint: &'static str,
    },

    /// An iterative method failed to reach its tolerance.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A configuration field failed validation. `path` is the
    /// dotted JSON path of the offending field.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
