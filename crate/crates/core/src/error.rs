use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates an invariant.
    #[error("configuration error: {0}")]
    Config(String),

    /// A config file key could not be parsed or validated.
    #[error("config error at line {line}, key `{key}`: {message}")]
    ConfigKey {
        key: String,
        line: usize,
        message: String,
    },

    /// An argument is outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid combination of command-line or API usage.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("training error at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("sampling error (sample {sample}, step {step}): {message}")]
    Sampling {
        sample: usize,
        step: usize,
        message: String,
    },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Broken internal contract (mismatched buffer lengths and the like).
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Checkpoint load failures. Each corruption class has its own variant.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes {found:?}, expected \"ISAG\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("checkpoint truncated: needed {needed} bytes, file has {available}")]
    Truncated { needed: usize, available: usize },

    #[error("parameter blob holds {found} values but the architecture needs {expected}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
}
