//! Denoising diffusion for image synthesis: a linear-beta noising schedule,
//! a time-conditioned U-Net that predicts the injected noise, an MSE training
//! loop, and a deterministic strided sampler that inverts the process in far
//! fewer steps than it was trained with.

pub mod sample;
pub mod schedule;
pub mod train;
pub mod unet;

pub use sample::{ddim_sample, ddim_sample_each, ddim_step, DdimSamplerConfig};
pub use schedule::{make_schedule, make_taus, q_sample, NoiseSchedule};
pub use train::{
    ddpm_loss, ddpm_loss_step, draw_noise_batch, eps_mse, eps_mse_grad, train_diffusion,
    DiffusionTrainConfig, DiffusionTrainStats, NoisedBatch,
};
pub use unet::{timestep_embedding, UNet, UNetSpec};
