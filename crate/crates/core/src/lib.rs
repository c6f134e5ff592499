//! Customized text-to-image generation at desk scale: a pixel-space toy
//! diffusion model that learns one image-shared subject embedding plus
//! per-image pose/background embeddings produced by attribute mappers,
//! trained with a masked cross-attention loss and stochastic background
//! filtering, then composed selectively at inference.

pub mod ckpt;
pub mod compose;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod losses;
pub mod mappers;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{DecalError, Result};
