//! Discovering invariance-preserving sparse subnetworks inside dense MLPs.
//!
//! The pipeline trains a dense supernetwork from a kappa-scaled
//! initialization on a supervised plus contrastive objective, prunes the
//! encoder globally by weight magnitude in one shot, resets the surviving
//! weights to their initial values and fine-tunes the subnetwork with the
//! supervised loss alone.
//!
//! Numeric code is generic over [`Scalar`] (`f32` and `f64`); the aliases
//! below name the two concrete instantiations.

pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod objective;
pub mod pipeline;
pub mod prune;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Model32 = nn::ModelState<f32>;
pub type Model64 = nn::ModelState<f64>;
pub type Optimizer32 = nn::Optimizer<f32>;
pub type Optimizer64 = nn::Optimizer<f64>;
