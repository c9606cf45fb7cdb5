//! A small reverse-mode automatic differentiation engine over dense `f32`
//! tensors in NCHW layout.
//!
//! The op set is just wide enough for convolutional image-to-image networks:
//! elementwise arithmetic, broadcasting reductions, channel concatenation,
//! strided (transposed) convolutions and 2×2 max pooling. Backward rules are
//! expressed in terms of the same ops, so [`grad`] can build a differentiable
//! graph of the gradient itself. Gradient penalties that differentiate a
//! gradient norm with respect to network weights rely on this.

mod conv;
mod tensor;
mod var;

pub use conv::{conv2d, conv2d_filter_grad, conv2d_transpose, ConvGeom};
pub use tensor::{numel, Tensor};
pub use var::{grad, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ShapeError {
    #[error("shape {shape:?} needs {} elements, got {len}", numel(.shape))]
    ElementCount { shape: Vec<usize>, len: usize },
    #[error("cannot reshape {from:?} into {to:?}")]
    Reshape { from: Vec<usize>, to: Vec<usize> },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    Mismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("empty tensor list")]
    Empty,
}
