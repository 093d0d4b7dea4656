//! Multi-modal semantic segmentation: per-modality LoRA-adapted hierarchical
//! encoders, an FPN neck, top-k routed mixture-of-experts fusion, a
//! dual-pathway mask decoder, and OHEM training, together with a synthetic
//! data generator and a missing-modality / noise robustness harness.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod model;
pub mod neck;
pub mod numerics;
pub mod training;

pub use error::{Error, ErrorKind, Result};
