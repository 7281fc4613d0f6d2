use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic at byte offset 0: expected \"CEF1\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("truncated payload: needed {needed} bytes at byte offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },

    #[error("invalid has_labels flag {0} at byte offset 12")]
    BadLabelFlag(u8),

    #[error("row {row} has zero (or non-finite) norm")]
    ZeroRow { row: usize },

    #[error("row {row}: label {value} is outside the u32 range")]
    LabelOutOfRange { row: usize, value: String },

    #[error("csv: {0}")]
    Csv(String),

    #[error("config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cluster {cluster} has a zero-norm centroid")]
    ZeroCentroid { cluster: usize },

    #[error("class {class} has no samples")]
    EmptyClass { class: u32 },

    #[error("cost matrix contains a non-finite value at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },

    #[error("infeasible scenario: {0}")]
    Infeasible(String),

    #[error("stage {stage}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps `self` with the name of the pipeline stage that produced it.
    /// The wrapped error stays reachable through `source()`.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            already @ Error::Stage { .. } => already,
            other => Error::Stage { stage, source: Box::new(other) },
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
