//! Gaussian-token vision transformer pipeline.
//!
//! Images are encoded as compact sets of 2D Gaussians by a denoising
//! transformer encoder, rendered back to pixels by a differentiable splatting
//! rasterizer, and classified by a transformer that reads the Gaussian
//! parameters directly. Classifier gradients can be fed back into the encoder
//! update to steer Gaussians toward class-salient regions.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gaussian;
pub mod interpret;
pub mod losses;
pub mod models;
pub mod raster;
pub mod seeding;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
