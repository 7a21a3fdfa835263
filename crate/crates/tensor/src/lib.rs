//! Dense `f64` tensors with a reverse-mode autodiff tape.
//!
//! The op set is deliberately small: what a modulated-convolution generator,
//! a convolutional critic and their losses need, including double backward.

pub mod gradcheck;
mod ops;
mod sparse;
mod tensor;
mod var;

pub use ops::{sigmoid, softplus};
pub use sparse::{LinearMap1d, SparseRows};
pub use tensor::{broadcast_shape, PadMode, Tensor};
pub use var::{grad, no_grad, Var};
