//! Change-mask detection from goal/current image pairs: a co-scale
//! conv-attentional encoder with cross-attention fusion, a correlation-aware
//! decoder, and a synthetic 2-D room rearrangement dataset to train on.

pub mod attention;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod image_ops;
pub mod imageio;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod param;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{NoGradGuard, Tensor};

/// Training/eval precision.
pub type Tensor32 = tensor::Tensor<f32>;
/// Gradient-check precision.
pub type Tensor64 = tensor::Tensor<f64>;
