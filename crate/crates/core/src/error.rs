use std::io;

use thiserror::Error;

pub type Result<T, E = HadError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HadError {
    #[error("malformed FASTA at line {line}: {reason}")]
    MalformedFasta { line: usize, reason: String },

    #[error("illegal base {base:?} at position {pos}")]
    IllegalBase { pos: usize, base: char },

    #[error("length {len} is not divisible by k={k}")]
    LengthNotDivisible { len: usize, k: usize },

    #[error("invalid token id {0}")]
    InvalidTokenId(u32),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("duplicate parameter name {0:?}")]
    DuplicateParameter(String),

    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),

    #[error("position {pos} out of range (max_len {max_len})")]
    PositionOutOfRange { pos: usize, max_len: usize },

    #[error("k-mer group {group} is not fully visible")]
    IncompleteGroup { group: usize },

    #[error("cross-attention needs at least one visible token")]
    NoVisibleTokens,

    #[error("teacher cache has no entry for {0:?}")]
    CacheMiss(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("reconstruction loss needs at least one masked target")]
    EmptyMaskSet,

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("classification head needs at least 2 classes, got {0}")]
    InvalidHead(usize),

    #[error("empty input")]
    EmptyInput,

    #[error("invalid {what} file: {reason}")]
    BadFile { what: &'static str, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl HadError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        HadError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn dims(what: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        HadError::DimensionMismatch {
            what: what.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
