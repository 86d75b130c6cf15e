//! Crate-wide error type and the process exit codes the CLI maps it to.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, taxonomy, or incompatible inputs.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed on-disk container, manifest, or checkpoint.
    #[error("format error: {0}")]
    Format(String),

    /// Tensor/raster shape violations.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite values where finite ones are required (NaN loss, bad costs).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// CLI exit code: 0 success, 2 config error, 3 numerical failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numerical(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
