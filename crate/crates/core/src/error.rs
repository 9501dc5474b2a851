use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range for {axis} (extent {bound})")]
    Range {
        axis: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("step index error: {0}")]
    StepIndex(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("infeasible parameters: {0}")]
    Feasibility(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite values at step {step}")]
    Divergence { step: usize },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
