use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("tiff: {0}")]
    Tiff(#[from] tiff::TiffError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("inconsistent page dimensions: page {page} is {found:?}, expected {expected:?}")]
    InconsistentPages {
        page: usize,
        found: (u32, u32),
        expected: (u32, u32),
    },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("architecture syntax error: {0}")]
    ArchSyntax(String),

    #[error("shape inference failed: {0}")]
    ShapeInference(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("phantom generation failed: {0}")]
    Phantom(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// CSV errors with I/O failures attributed to `path`.
    pub(crate) fn csv_at(path: &std::path::Path, e: csv::Error) -> Self {
        if !matches!(e.kind(), csv::ErrorKind::Io(_)) {
            return Error::Csv(e);
        }
        match e.into_kind() {
            csv::ErrorKind::Io(err) => Error::io(path, err),
            _ => unreachable!("checked above"),
        }
    }
}
