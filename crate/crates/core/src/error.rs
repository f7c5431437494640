use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the locking, network, attack and data layers.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent or invalid configuration (scheme, bindings, scenario).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed inputs to an operation (shapes, labels, datasets).
    #[error("input error: {0}")]
    Input(String),

    /// Binary file decoding failure, naming the field and byte offset.
    #[error("parse error in {path}: {field} at byte offset {offset}: {reason}")]
    Parse {
        path: String,
        field: &'static str,
        offset: u64,
        reason: String,
    },

    /// Victim training diverged.
    #[error("training error: {0}")]
    Training(String),

    /// A precondition of the attack pipeline does not hold.
    #[error("attack precondition failed: {0}")]
    Attack(String),

    #[error("i/o error on {path}: {source}")]
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

pub type Result<T, E = Error> = std::result::Result<T, E>;
