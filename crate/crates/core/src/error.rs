use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("invalid tensor: {0}")]
    Tensor(String),

    #[error("backward requested before forward: {0}")]
    BackwardBeforeForward(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("gradient check inconclusive: all {0} elements were skipped near kinks")]
    Inconclusive(usize),

    #[error("invalid quantizer: {0}")]
    Quantizer(String),

    #[error("invalid bit-width candidates: {0}")]
    Bits(String),

    #[error("invalid selection map: {0}")]
    Selection(String),

    #[error("bit-width {0} is not a candidate of this model")]
    NotACandidate(u8),

    #[error("invalid architecture: {0}")]
    Arch(String),

    #[error("optimizer: {0}")]
    Optimizer(String),

    #[error("error model: {0}")]
    Analysis(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(node: usize, op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            node,
            op,
            detail: detail.into(),
        }
    }
}
