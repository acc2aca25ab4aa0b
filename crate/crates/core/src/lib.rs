//! Two-description learned image codec with a trainable pair of scalar
//! quantizers.
//!
//! Numerical code is generic over [`Scalar`] (`f32` for training and coding,
//! `f64` for gradient verification); the `*32` aliases below are the types
//! the command-line tool works with.

mod bytes;
pub mod diff;
pub mod entroc;
pub mod error;
pub mod imageio;
pub mod losses;
pub mod networks;
pub mod quant;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = diff::Graph<f32>;
pub type Graph64 = diff::Graph<f64>;
pub type Codec32 = networks::CodecModel<f32>;
pub type Codec64 = networks::CodecModel<f64>;
