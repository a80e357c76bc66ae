//! Toolkit for quantifying static vs. dynamic information in toy
//! spatiotemporal networks: synthetic video generation, factor-pair
//! sampling, correlation-based channel probing, and interventions
//! (unit removal, guided dropout, fusion variants).

pub mod dataset;
pub mod error;
pub mod interventions;
pub mod nn;
pub mod pairs;
pub mod planted;
pub mod probe;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod tensor;
pub mod video;

pub use error::{Error, Result};
pub use rng::StreamRng;
pub use scalar::Scalar;

/// Working-precision tensor (training, datasets, traces).
pub type Tensor32 = tensor::Tensor<f32>;
/// Verification-precision tensor (gradient checks).
pub type Tensor64 = tensor::Tensor<f64>;
pub type Video32 = video::Video<f32>;
pub type Video64 = video::Video<f64>;
pub type Dataset32 = dataset::Dataset<f32>;
