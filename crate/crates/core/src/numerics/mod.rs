//! Dense tensors, reverse-mode differentiation, Adam and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use adam::{clip_grad_norm, AdamConfig, AdamState};
pub use checkpoint::{stored_scalar, Checkpoint};
pub use graph::{Gradients, Graph, Var, BCE_CLAMP, LAYERNORM_EPS, MASK_SENTINEL};
pub use params::{BoundParams, Param, ParamStore};
pub use tensor::Tensor;
