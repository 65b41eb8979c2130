//! Small from-scratch neural network engine for weekly price forecasting
//! and progressive continual learning.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); data
//! handling and walk-forward evaluation work in `f64`.

pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod progressive;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod walkforward;
pub mod zoo;

pub use error::{Error, Result};
pub use graph::{ModelGraph, Network};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use zoo::{build_model, ModelId};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Network64 = Network<f64>;
pub type Network32 = Network<f32>;
