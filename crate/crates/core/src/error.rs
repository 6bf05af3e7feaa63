use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty logits")]
    EmptyLogits,

    #[error("shape mismatch: {op} got {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss((usize, usize)),

    #[error("image has no regions")]
    NoRegions,

    #[error("empty concept set")]
    NoConcepts,

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("empty sequence")]
    EmptySequence,

    #[error("sequence of length {len} exceeds limit {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("length mismatch: {outputs} step outputs vs {targets} targets")]
    LengthMismatch { outputs: usize, targets: usize },

    #[error("beam width must be at least 1")]
    ZeroBeam,

    #[error("empty references")]
    EmptyReferences,

    #[error("empty corpus statistics")]
    EmptyStats,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("not a SFAT file")]
    BadMagic,

    #[error("not a SFCK checkpoint")]
    BadCheckpointMagic,

    #[error("unsupported {format} version {version}")]
    Version { format: &'static str, version: u32 },

    #[error("truncated {0}")]
    Truncated(&'static str),

    #[error("record '{id}': {msg}")]
    Record { id: String, msg: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unknown image id '{id}'; available: {available}")]
    UnknownImage { id: String, available: String },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
