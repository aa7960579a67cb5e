use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or dimensionally inconsistent input values.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A scalar parameter outside its admissible range (tau <= 0, k = 0, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A combination of settings the method cannot run with.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at {0}")]
    Divergence(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{source_name}: line {line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("line {line}: label {label:?} is not in the label space")]
    UnknownLabel { label: String, line: usize },

    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
