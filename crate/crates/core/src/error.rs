use thiserror::Error;

use crate::io::ArtifactError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("length mismatch in {op}: expected {expected}, got {actual}")]
    LengthMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("index {index} out of range for {op} (limit {limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("group size {group_size} does not divide {cols} columns")]
    GroupSize { cols: usize, group_size: usize },
    #[error("unsupported bit-width {0} (expected one of 2, 3, 4, 8)")]
    UnsupportedBits(u8),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid scaling vector: {0}")]
    InvalidScaling(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
