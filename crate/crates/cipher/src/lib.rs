//! Deepfake-image detection pipeline: a progressive GAN supplies a
//! discriminator backbone, a diffusion model generates the fakes, and the
//! discriminator is fine-tuned into a real-vs-generated classifier.

pub mod cli;
pub mod dataio;
pub mod detector;
pub mod diffusion;
pub mod error;
pub mod evalharness;
pub mod nn;
pub mod progan;

pub use error::{CipherError, Result};
