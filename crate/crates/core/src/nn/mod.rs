//! A small CPU engine for the convolutional network: dense NCHW tensors, layers with
//! explicit backward passes, and Adam.

mod conv;
mod norm;
pub mod ops;
mod param;
mod real;
mod tensor;

pub use conv::Conv2d;
pub use norm::{BatchNorm2d, Mode, BN_EPS, BN_MOMENTUM};
pub use param::{Adam, Param};
pub use real::Real;
pub use tensor::Tensor;
