//! Vision transformers whose attention heads start from multi-scale focal
//! attention biases, on a small CPU reverse-mode autodiff engine.

pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod focal_bias;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
