use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    #[error("title unusable for pretraining: no expanded-vocabulary term occurrences")]
    NoTermOccurrences,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite gradient in parameter `{name}` at index {index}")]
    NonFiniteGradient { name: &'static str, index: usize },

    #[error("duplicate document id {0}")]
    DuplicateDocId(u32),

    #[error("vocabulary hash mismatch: expected {expected:016x}, found {found:016x}")]
    VocabMismatch { expected: u64, found: u64 },

    #[error("infeasible synthetic configuration for {quantile} overlap quantile: {reason}")]
    InfeasibleOverlap { quantile: &'static str, reason: String },

    #[error("invalid label set: {0}")]
    InvalidLabels(String),

    #[error("malformed {what} at line {line}: {reason}")]
    Parse {
        what: &'static str,
        line: usize,
        reason: String,
    },

    #[error("malformed binary {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
