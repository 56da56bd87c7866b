//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's preconditions.
    #[error("shape error: {0}")]
    Shape(String),

    /// An API contract was violated (wrong argument structure, out-of-range
    /// values, mask outside [0,1] in verification mode, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// A value that must stay finite became NaN or infinite.
    #[error("non-finite value in {what}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { what: String, step: Option<u64> },

    /// Configuration file or flag values failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint or corpus files do not match the requested configuration.
    #[error("mismatch error: {0}")]
    Mismatch(String),

    /// Malformed file contents (checkpoint container, PPM, skeleton, manifest).
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
