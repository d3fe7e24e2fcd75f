//! Simulator for synchronous federated learning under per-round compute
//! deadlines, with layer-wise straggler-aware aggregation (SALF) and the
//! usual baselines.
//!
//! Core numerics are generic over the scalar type; the aliases below fix it
//! to `f64`, which the engine and the verifiers use throughout.

pub mod aggregation;
pub mod data;
pub mod engine;
pub mod error;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod straggler;
pub mod theory;

pub use error::{Error, Result};
pub use scalar::{Real, Scalar};

pub type Params = nn::LayerwiseParams<f64>;
pub type Gradient = nn::PartialGradient<f64>;
pub type Dataset = data::Dataset<f64>;
pub type FederatedDataset = data::FederatedDataset<f64>;
pub type Unbiasing = aggregation::UnbiasingConstants<f64>;
