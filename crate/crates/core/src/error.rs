use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("index {index} out of range for {len} frames")]
    OutOfRange { index: usize, len: usize },

    #[error("eigen-solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("unsupported op in recorded graph: {0}")]
    UnsupportedOp(String),

    #[error("non-finite activation after layer {layer}")]
    NonFinite { layer: usize },

    #[error("training diverged at epoch {epoch} step {step}: loss {loss:e}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("malformed pose file: {0}")]
    PoseFormat(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
