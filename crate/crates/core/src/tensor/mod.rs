//! Dense tensors and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain row-major value. Differentiable computation happens
//! on a [`Tape`]: leaves are registered with [`Tape::param`] or
//! [`Tape::constant`], every op on a [`Var`] appends a node, and
//! [`Tape::backward`] sweeps the nodes in reverse, accumulating gradients
//! into the trainable leaves.
//!
//! Layout is NCHW for convolutions; token maps are channels-last.

mod conv;
mod depthwise;
mod elementwise;
pub mod gradcheck;
mod layout;
mod linalg;
mod nn;
mod scalar;
mod tape;
mod value;

pub use elementwise::broadcast_shape;
pub use scalar::{DType, Scalar};
pub use tape::{Tape, Var};
pub use value::{numel, strides, Tensor};
