//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! Every operation that touches a tensor requiring gradients records a
//! backward closure. [`Tensor::backward`] walks that graph once in reverse
//! topological order and accumulates into the leaves.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod module;
mod ops;
pub mod optim;
mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use module::{Conv2d, LayerNorm, Linear, Module};
pub use ops::nn::{dropout_mask, AttentionOptions};
pub use optim::{Adam, AdamConfig, OptState};
pub use tensor::{grad, grad_enabled, no_grad, numel, GraphNode, OpGraph, Tensor};
