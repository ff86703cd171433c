//! 1D convolutional event detector for apnea-hypopnea scoring.
//!
//! The pipeline: synthetic data generation → preprocessing → anchor-grid
//! detection network → matching-based training with hard-negative mining →
//! NMS inference → multi-scorer consensus → IoU / AHI / diagnosis evaluation.
//!
//! The numeric core is generic over the scalar type (see [`scalar::Scalar`]);
//! training pipelines use the f64 aliases below.

pub mod cli;
pub mod config;
pub mod error;
pub mod events;
pub mod grid;
pub mod infer;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod scalar;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

/// Default tensor type used by the training pipeline.
pub type Tensor = nn::tensor::Tensor<f64>;
/// Default Adam state used by the training pipeline.
pub type AdamState = nn::adam::AdamState<f64>;
