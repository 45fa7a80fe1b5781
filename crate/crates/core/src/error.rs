use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or missing configuration (manifest, hyperparameters).
    #[error("configuration error: {0}")]
    Config(String),

    /// A file could not be read or decoded.
    #[error("cannot ingest {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    /// The data does not satisfy a structural requirement (sample counts,
    /// disjointness, empty classes).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A caller violated an operation's contract (shapes, unknown classes,
    /// id collisions).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at episode {episode} (classes {classes:?}, seed {seed})")]
    NonFinite { episode: u64, classes: Vec<String>, seed: u64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
