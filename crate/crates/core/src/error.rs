use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// The variants line up with the CLI exit codes: argument/config problems,
/// I/O, schema violations in input files, numerical faults and training
/// divergence are all distinguishable by the caller.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical error in {op}: {detail}")]
    Numerical { op: String, detail: String },

    #[error("model error: {0}")]
    Model(String),

    #[error("training diverged at step {step}: {detail}")]
    Training { step: usize, detail: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("comparison error: {0}")]
    Comparison(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn numerical(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
