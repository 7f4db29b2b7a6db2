use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced anywhere in the toolkit.
///
/// Variants are split so callers (the CLI in particular) can tell contract
/// violations (wrong shapes, bad arguments) apart from malformed data.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed npy data: {0}")]
    NpyFormat(String),

    #[error("unsupported npy dtype {0:?} (expected '<f4' or '<f8')")]
    UnsupportedDtype(String),

    #[error("fortran-order npy arrays are not supported")]
    FortranOrder,

    #[error("malformed csv data: {0}")]
    Csv(String),

    #[error("ragged csv: row {row} has {found} fields, expected {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("class count mismatch: expected {expected} classes, found {found}")]
    ClassMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid calibration parameters: {0}")]
    InvalidParams(String),

    #[error("invalid labels: {0}")]
    Labels(String),

    #[error("cholesky factorization failed at pivot {pivot} with epsilon {epsilon:e}; retry with epsilon_scale >= {suggested:e}")]
    Factorization {
        pivot: usize,
        epsilon: f64,
        suggested: f64,
    },

    #[error("training diverged: loss kept increasing after {halvings} step halvings")]
    Divergence { halvings: usize },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error describes bad or unreadable input data rather
    /// than a violated call contract.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::NpyFormat(_)
                | Error::UnsupportedDtype(_)
                | Error::FortranOrder
                | Error::Csv(_)
                | Error::RaggedRow { .. }
                | Error::NonFinite { .. }
                | Error::Empty(_)
                | Error::Json(_)
                | Error::Labels(_)
                | Error::InvalidParams(_)
        )
    }
}
