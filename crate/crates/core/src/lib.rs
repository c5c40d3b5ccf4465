//! Desk-scale toolkit for 6-channel cellular image classification.
//!
//! The numeric core (tensors, the autodiff graph, losses) is generic over the
//! scalar type via [`scalar::Scalar`]; the pipeline modules (model, datasets,
//! training, checkpoints) pin `f64` through the aliases below.

pub mod augment;
pub mod data;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod ops;
pub mod pgm;
pub mod scalar;
pub mod semisup;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// `f64` tensor, the pipeline's working type.
pub type Tensor64 = tensor::Tensor<f64>;
/// `f64` autodiff graph.
pub type Graph64 = graph::Graph<f64>;
/// `f64` loss hyperparameters.
pub type LossConfig64 = losses::LossConfig<f64>;
