//! Subject-driven image composition with a small latent inpainting
//! diffusion model: data, training, inference, evaluation.

pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod composer;
pub mod datasets;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod imaging;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod textcond;
pub mod trainer;

pub use error::{Error, Result};
