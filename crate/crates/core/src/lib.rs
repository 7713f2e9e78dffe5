//! Encoder-decoder transformer with n-gram masked decoder self-attention.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar for callers that do not care.

pub mod attention;
pub mod error;
pub mod incremental;
pub mod mask;
pub mod model;
pub mod ops;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use mask::{MaskMatrix, MaskSpec};
pub use rng::SeededRng;
pub use scalar::Scalar;

pub type TensorF64 = tensor::Tensor<f64>;
pub type TensorF32 = tensor::Tensor<f32>;
pub type ParamsF64 = model::ModelParams<f64>;
pub type ParamsF32 = model::ModelParams<f32>;
pub type DecodeStateF64 = incremental::DecodeState<f64>;
pub type CheckpointF64 = model::Checkpoint<f64>;
