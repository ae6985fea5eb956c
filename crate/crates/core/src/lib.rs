//! Conditional generative denoiser for enhanced low-light images.
//!
//! A noisy image is encoded by a Transformer conditionalizer into a condition
//! map. A latent decoder predicts the noise map, which is subtracted and then
//! refined by a learned bank of blur kernels. Training is variational; a
//! posterior encoder sees the clean image. Everything runs on a small
//! reverse-mode autograd over CPU tensors.

pub mod autograd;
pub mod cgen;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dpe;
pub mod error;
pub mod imaging;
pub mod mkcr;
pub mod model;
pub mod nn;
pub mod noise;
pub mod nrtc;
pub mod optim;
pub mod real;
pub mod rng;
pub mod sequence;
pub mod tensor;
pub mod track;
pub mod train;

pub use error::{Error, Result};
pub use imaging::{BoundingBox, ImagePatch};
pub use real::Real;
pub use tensor::Tensor;
