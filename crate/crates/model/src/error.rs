use thiserror::Error;

use crate::config::ConfigError;
use crate::vocab::TokenizeError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error("input sequence is empty")]
    EmptySequence,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{what}: expected {expected}, got {got}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("answer does not end with [DET]")]
    MissingDet,
    #[error("video has no frame pairs")]
    EmptyVideo,
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("select_k {k} exceeds the {tokens} tokens per layer")]
    SelectK { k: usize, tokens: usize },
}
