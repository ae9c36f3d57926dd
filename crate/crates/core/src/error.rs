use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("cannot normalize a zero-norm vector")]
    ZeroNorm,

    #[error("non-finite value at position {0}")]
    NonFinite(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("item {index} in batch: {source}")]
    BatchItem {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("hinge argument {value:e} of triplet {triplet} lies within {margin:e} of the kink")]
    KinkTooClose { triplet: usize, value: f64, margin: f64 },

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("degenerate triplet: positive and negative items coincide")]
    DegenerateTriplet,

    #[error("too few points: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("dimension {dim} is not divisible into {m} subspaces")]
    BadSubspaceSplit { dim: usize, m: usize },

    #[error("code {code} in subspace {subspace} is out of range for ksub={ksub}")]
    CorruptCode { subspace: usize, code: u8, ksub: usize },

    #[error("duplicate item id {0}")]
    DuplicateItem(u64),

    #[error("corrupt index file at byte {offset}: {reason}")]
    CorruptIndex { offset: u64, reason: String },

    #[error("corrupt file at byte {offset}: {reason}")]
    CorruptFile { offset: u64, reason: String },

    #[error("duplicate qrel on line {line}")]
    DuplicateQrel { line: usize },

    #[error("parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("query {0} has no entry in qrels")]
    MissingQuery(u64),

    #[error("indexes cover different corpora: {0}")]
    MismatchedCorpora(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dims(expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch { expected, actual }
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::dims(expected, actual))
    }
}
