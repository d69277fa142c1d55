//! Reverse-mode automatic differentiation over NCHW `f32` tensors.
//!
//! Gradients are computed by [`grad`]. Passing `create_graph = true` records the
//! backward pass itself, so gradient penalties can be differentiated again.

mod conv;
mod kernels;
mod ops;
mod tensor;
mod var;

pub use conv::{conv2d, conv2d_backward_data, conv2d_backward_weight};
pub use kernels::{avg_pool2, broadcast_shape, upsample2};
pub use tensor::{numel, Shape, Tensor};
pub use var::{grad, grad_with_seed, is_grad_enabled, no_grad, GradModeGuard, Var};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AutogradError {
    #[error("higher-order gradients requested while graph recording is disabled")]
    HigherOrderUnavailable,
    #[error("gradient seed shape {actual:?} does not match output shape {expected:?}")]
    SeedShape { expected: Shape, actual: Shape },
}
