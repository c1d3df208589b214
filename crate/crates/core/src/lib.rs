//! FlatFormer: a flat Transformer for knowledge tracing with session-aware
//! input embeddings and a pre-computed power-law forgetting bias on the
//! attention logits.
//!
//! The numeric core is generic over [`Scalar`] (`f64` by default, `f32`
//! opt-in); the aliases below fix the common widths.

pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
