use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// Variants are split into validation failures (bad input, bad config) and
/// runtime failures (I/O, numerics) so the command line can map them onto
/// distinct exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("duplicate entry for cell {cell}, gene {gene}")]
    DuplicateEntry { cell: usize, gene: usize },

    #[error("index out of range: {what} {index} (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("empty result: {0}")]
    Empty(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate mask plan: no positions selected for cell with {n_nonzero} non-zero and {n_zero} zero genes")]
    DegeneratePlan { n_nonzero: usize, n_zero: usize },

    #[error("cell {cell} has no unmasked non-zero genes; encoder input would be empty")]
    NoSurvivors { cell: usize },

    #[error("non-finite value encountered in {stage} (layer {layer})")]
    NonFinite { stage: &'static str, layer: usize },

    #[error("missing config key `{0}`")]
    MissingKey(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's input rather than by the run
    /// itself.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::NonFinite { .. } | Error::Io { .. } | Error::Csv(_) | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
