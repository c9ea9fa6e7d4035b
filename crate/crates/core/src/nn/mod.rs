//! Minimal tensor/autodiff engine the models are built on.

pub mod blocks;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use layers::{copy_params, Conv2d, DepthwiseConv2d, GroupNorm, Linear, Params};
pub use optim::Adam;
pub use tensor::{grad_enabled, no_grad, Dtype, Scalar, Tensor};
