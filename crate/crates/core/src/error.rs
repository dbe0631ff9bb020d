use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid token id {id} (vocabulary size {vocab})")]
    InvalidToken { id: usize, vocab: usize },
    #[error("shape mismatch in {layer}: {msg}")]
    ShapeMismatch { layer: String, msg: String },
    #[error("checkpoint corrupt at byte {offset}: {msg}")]
    Checkpoint { offset: u64, msg: String },
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("missing data: {0}")]
    MissingData(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("suite generation failed: {0}")]
    SuiteGeneration(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
