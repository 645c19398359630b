pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod latent;
pub mod metrics;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod seg;

pub use error::{Error, Result};
