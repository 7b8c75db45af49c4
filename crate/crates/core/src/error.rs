//! Crate-wide error type.
//!
//! Every fallible operation in the crate returns [`Error`]; variants carry
//! enough context (line numbers, ids, shapes) to diagnose a failure without
//! a debugger.

use thiserror::Error;

/// Unified error type for the whole pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io failure: {0}")]
    IoFailure(#[from] std::io::Error),

    #[error("manifest line {line} is malformed: {detail}")]
    MalformedLine { line: usize, detail: String },

    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),

    #[error("unknown sensor {0:?}")]
    UnknownSensor(String),

    #[error("group {0:?} members disagree on object_id/position_id")]
    GroupConsistency(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no eligible samples for split={split} media={media}")]
    NoEligibleSamples { split: String, media: String },

    #[error("mask is empty; a reconstruction loss divides by |mask|")]
    EmptyMask,

    #[error("sample {0:?} has no next-frame target")]
    MissingNextFrame(String),

    #[error("empty index subset for contrastive direction {0}")]
    EmptySubset(&'static str),

    #[error("every alignment direction has an empty index subset")]
    AllSubsetsEmpty,

    #[error("value {0} outside the open interval (0, 1)")]
    DomainError(f32),

    #[error("crop at ({x}, {y}) size {side} exceeds texture of size {limit}")]
    OutOfBounds { x: usize, y: usize, side: usize, limit: usize },

    #[error("unknown material {0:?}")]
    UnknownMaterial(String),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("empty text cannot be encoded")]
    EmptyText,

    #[error("checkpoint incompatible with the configured architecture: {0}")]
    IncompatibleCheckpoint(String),

    #[error("checkpoint format version {found} != supported {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupted checkpoint at byte offset {offset}: {detail}")]
    CorruptCheckpoint { offset: u64, detail: String },

    #[error("numerical divergence at step {step}: loss is not finite (batch {batch_ids:?})")]
    NumericalDivergence { step: usize, batch_ids: Vec<String> },

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("no eligible pairs for matching evaluation")]
    NoEligiblePairs,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("training runs in two stages: stage 2 (alignment + cross-sensor matching) starts from a stage-1 masked-pretraining checkpoint; pass --init <checkpoint> or opt out with --from-scratch")]
    MissingStage1,

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
