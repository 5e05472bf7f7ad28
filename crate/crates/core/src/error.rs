use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the pipeline can report.
///
/// Variants are grouped by the class the CLI maps to an exit code:
/// configuration, data, numeric, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dimension error at line {line}: {field} has length {got}, expected {expected}")]
    Dimension {
        line: usize,
        field: String,
        expected: usize,
        got: usize,
    },

    #[error("label error at line {line}: label {label} is not below class count {class_count}")]
    Label {
        line: usize,
        label: usize,
        class_count: usize,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("degenerate contrastive batch: no anchor has both a positive and a negative ({rows} rows)")]
    DegenerateBatch { rows: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
