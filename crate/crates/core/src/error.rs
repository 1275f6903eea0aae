use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is missing or out of range. `field` is the
    /// dotted key path (e.g. `model.pattern`).
    #[error("{field}: {message}")]
    Config { field: String, message: String },

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("validation failed: {0}")]
    Validation(String),

    /// The caller used an object in a state that does not allow the call,
    /// e.g. stepping an environment whose episode is over.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("missing artifact {path}: {message}")]
    MissingArtifact { path: PathBuf, message: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
