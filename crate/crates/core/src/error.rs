use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, empty inputs).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input data failed a value check (normalization, ranges, config).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("training diverged at {stage}: {detail}")]
    Divergence { stage: String, detail: String },

    #[error("brute-force enumeration refused: T + L = {size} exceeds {limit}")]
    TooLarge { size: usize, limit: usize },

    #[error("missing pairing for utterance `{0}`")]
    Pairing(String),

    #[error("corrupt file {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },

    #[error("truncated file {path}: expected {expected} bytes of payload, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("incomplete record: {0}")]
    IncompleteRecord(String),

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

    pub(crate) fn corrupt(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
