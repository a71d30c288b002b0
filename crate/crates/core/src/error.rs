use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("mask selects no entries")]
    DegenerateMask,
    #[error("support set is empty")]
    DegenerateSupport,
    #[error("support filter left no rows")]
    EmptyFilter,
    #[error("backward already ran on this graph; call zero_grad first")]
    BackwardTwice,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("ingestion error at row {row}: {message}")]
    Ingestion { row: usize, message: String },
    #[error("state error: {0}")]
    State(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("training diverged at task {task}, step {step}: {parts}")]
    Divergence {
        task: usize,
        step: usize,
        parts: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
