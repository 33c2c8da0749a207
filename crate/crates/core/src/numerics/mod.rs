//! Dense linear algebra, differentiable building blocks, optimizer and RNG.

pub mod conv;
pub mod gru;
pub mod matrix;
pub mod optim;
pub mod params;
pub mod rng;
pub mod spectral;

pub use conv::{CausalConvNet, ConvCache, ResidualBlock};
pub use gru::{gru_backward, gru_forward, gru_sequence, GruParams, GruStep};
pub use matrix::Matrix;
pub use optim::{AdamConfig, OptimizerState};
pub use params::ParamGroup;
pub use rng::RngStream;
pub use spectral::{spectral_clip, spectral_norm, spectral_norm_default};
