//! Unified static/dynamic multi-sensor tactile representation learning at
//! desk scale: a deterministic synthetic multi-sensor touch world, a masked
//! reconstruction + next-frame pretraining stage, a modality-missing-aware
//! touch/vision/text alignment + cross-sensor matching stage, and an
//! evaluation harness (linear probing, silhouette separation, pair matching).

pub mod align;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod img;
pub mod input;
pub mod matching;
pub mod nn;
pub mod rng;
pub mod stage1;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
