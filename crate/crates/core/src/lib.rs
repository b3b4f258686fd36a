//! Universal representation transformer (URT) layer for multi-domain
//! few-shot classification.
//!
//! The crate trains a small attention layer that, for each few-shot task,
//! decides how to weight and blend the outputs of several frozen
//! domain-specific feature extractors ("backbones"). Tasks are classified
//! with cosine-similarity prototypes on the blended representation.
//!
//! Module map:
//!
//! * [`math`]: dense vector and matrix primitives.
//! * [`store`]: feature store, its on-disk format and a synthetic generator.
//! * [`sampler`]: variable-way, variable-shot episodes and set representations.
//! * [`layer`]: the attention layer itself.
//! * [`proto`]: prototype classification and the episodic loss.
//! * [`train`]: gradients, optimizer, training loop and model files.
//! * [`eval`]: accuracy reports, ranks, head sweeps, ablations and heatmaps.
//! * [`config`]: flat-key run configuration shared by the command-line tool.

pub mod config;
pub mod error;
pub mod eval;
pub mod layer;
pub mod math;
pub mod proto;
pub mod rng;
pub mod sampler;
pub mod store;
pub mod train;

pub use error::{ErrorCategory, FormatError, Result, UrtError};
