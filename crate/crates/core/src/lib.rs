//! Reasoning-prior distillation for quantile forecasting at desk scale.
//!
//! A small student language model reads a serialized context, its pooled
//! prompt states are projected into a toy forecaster's embedding space, and
//! both are trained jointly on cross-entropy plus pinball loss.

pub mod error;
pub mod fusion;
pub mod kv;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod student;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod tsfm;

pub use error::{Error, Result};
