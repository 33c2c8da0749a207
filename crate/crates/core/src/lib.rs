//! Conditional diffusion forecaster for new-product life cycles, with
//! stability tooling for its latent recursion.
//!
//! - [`numerics`]: dense matrices, seeded streams, GRU cell, spectral norms,
//!   Adam, causal convolutions.
//! - [`context`]: reference retrieval, fusion and the initial latent state.
//! - [`diffusion`]: noise schedule, score network, ancestral sampling.
//! - [`model`] and [`train`]: the full forecaster and its training loop.
//! - [`stability`]: Jacobian bounds, measurement and enforcement.
//! - [`oracle`]: linear-Gaussian oracle for the error recursion.
//! - [`metrics`]: point, distributional and shape metrics.
//! - [`pipeline`]: data, protocol, configuration and artifacts.
//!
//! Numerical code is generic over [`Scalar`]; the aliases below fix `f64`.

pub mod context;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod pipeline;
pub mod scalar;
pub mod stability;
pub mod train;

pub use error::{CdlfError, Result};
pub use scalar::Scalar;

pub type Matrix64 = numerics::matrix::Matrix<f64>;
pub type GruParams64 = numerics::gru::GruParams<f64>;
pub type NoiseSchedule64 = diffusion::NoiseSchedule<f64>;
pub type ReferenceLibrary64 = context::ReferenceLibrary<f64>;
pub type Model64 = model::Model<f64>;
pub type ModelParameters64 = model::ModelParameters<f64>;
