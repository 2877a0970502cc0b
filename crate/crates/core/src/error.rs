use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the selection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("non-numeric cell at ({row},{col})")]
    NonNumeric { row: usize, col: usize },

    #[error("missing `.imp` column")]
    MissingImpColumn,

    #[error("zero-variance column `{column}` in imputed dataset {dataset}")]
    ZeroVariance { column: String, dataset: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not positive definite (leading non-positive pivot at index {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("non-finite draw of `{parameter}` at iteration {iteration}")]
    NonFinite { parameter: String, iteration: usize },

    #[error("{0}")]
    Incompatible(String),

    #[error("experiment failed: {0}")]
    Experiment(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
