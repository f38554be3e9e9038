//! Crate-wide error type.
//!
//! Shape and dimension mismatches are programmer errors and panic via
//! `assert!` at the call site; this enum covers runtime failures that a
//! caller can meaningfully handle (bad files, bad configs, diverged
//! training).

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A model file failed to parse (wrong magic, version, or truncation).
    #[error("model format error: {0}")]
    ModelFormat(String),

    /// A config file failed to parse.
    #[error("config error: {0}")]
    Config(String),

    /// A loss turned non-finite during an update; the update was aborted.
    #[error("non-finite loss during update: {0}")]
    NonFiniteLoss(String),

    /// A CSV log could not be parsed back.
    #[error("csv error in {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
