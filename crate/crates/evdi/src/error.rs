//! Crate-wide error type.
//!
//! Errors are grouped by how the CLI maps them to exit codes: bad inputs or
//! precondition violations (`Domain`, `Shape`, `Config`) exit with 2, numeric
//! failures such as NaN losses (`Numeric`) exit with 3, and anything touching
//! the filesystem or file formats (`Io`, `Image`, `Format`) exits with 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvdiError {
    /// A precondition on an operation's arguments was violated.
    #[error("domain error: {0}")]
    Domain(String),

    /// Buffers or streams with incompatible dimensions.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid run configuration (bad value, unknown key, inconsistent keys).
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite values where finite numbers are required (NaN loss, ...).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    /// Malformed file contents (event CSV, PFM header, trajectory spec, ...).
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, EvdiError>;

impl EvdiError {
    pub fn domain(msg: impl Into<String>) -> Self {
        EvdiError::Domain(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        EvdiError::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        EvdiError::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        EvdiError::Numeric(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        EvdiError::Format(msg.into())
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            EvdiError::Domain(_) | EvdiError::Shape(_) | EvdiError::Config(_) => 2,
            EvdiError::Numeric(_) => 3,
            EvdiError::Io(_) | EvdiError::Image(_) | EvdiError::Format(_) => 4,
        }
    }
}
