use thiserror::Error;

/// Errors produced by the training library.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("non-finite value in {context}: {value}")]
    NonFinite { context: String, value: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("token {token} out of vocabulary (size {vocab})")]
    OutOfVocab { token: usize, vocab: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("training diverged at task {task} step {step}: {what}")]
    Diverged {
        task: usize,
        step: usize,
        what: String,
    },
}

pub type Result<T> = std::result::Result<T, CoreError>;
