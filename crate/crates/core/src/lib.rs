//! gnwd: guided nowcasting with diffusion.
//!
//! A desk-scale pipeline for probabilistic spatiotemporal forecasting:
//! a gravitational digit-motion simulator produces sequence data with exact
//! energy bookkeeping; a fixed orthonormal codec maps frames to a compact
//! latent space; a conditional diffusion model learns to forecast latent
//! futures; and a constraint-guidance mechanism steers each denoising
//! transition toward domain knowledge (energy conservation, anticipated
//! intensity). A verification suite covers the standard nowcasting metrics.

pub mod alignment;
pub mod codec;
pub mod config;
pub mod data_store;
pub mod denoiser;
pub mod metrics;
pub mod nbody;
pub mod nn;
pub mod diffusion;
pub mod error;
pub mod rand_util;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::TensorF32;
