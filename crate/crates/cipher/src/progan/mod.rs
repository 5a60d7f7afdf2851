//! Progressive GAN: a generator/discriminator pair grown resolution by
//! resolution. Training starts at 4x4 and doubles the working resolution at
//! each stage; freshly added layers are faded in smoothly so the networks
//! never see an abrupt architecture change.
//!
//! The discriminator trained here is the backbone later fine-tuned into the
//! real/fake detector, so its stage layout and parameter names are part of
//! the checkpoint contract.

pub mod discriminator;
pub mod generator;
pub mod loss;
pub mod train;

pub use discriminator::Discriminator;
pub use generator::Generator;
pub use loss::mse_adv_losses;
pub use train::{train_progressive, GanTrainConfig};

use crate::error::{CipherError, Result};
use crate::nn::Scalar;
use ndarray::Array4;

/// Base spatial resolution of stage 0.
pub const BASE_RESOLUTION: usize = 4;

/// Narrowest channel width a stage is allowed to shrink to.
pub const MIN_WIDTH: usize = 4;

/// Where a network currently sits in the progressive-growing schedule: which
/// resolution it operates at and how far the newest layers have been blended
/// in. `fade_alpha == 1` means the stage is fully stable.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProgressiveStage {
    pub index: usize,
    pub fade_alpha: f64,
}

impl ProgressiveStage {
    pub fn new(index: usize, fade_alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fade_alpha) {
            return Err(CipherError::Domain(format!(
                "fade alpha must lie in [0, 1], got {fade_alpha}"
            )));
        }
        Ok(ProgressiveStage { index, fade_alpha })
    }

    /// A fully blended (non-fading) stage.
    pub fn stable(index: usize) -> Self {
        ProgressiveStage {
            index,
            fade_alpha: 1.0,
        }
    }

    pub fn resolution(&self) -> usize {
        stage_resolution(self.index)
    }

    /// True while the newest layers still carry less than full weight. Stage
    /// 0 has no predecessor to blend with, so it is never fading.
    pub fn is_fading(&self) -> bool {
        self.index > 0 && self.fade_alpha < 1.0
    }
}

/// Resolution handled by stage `k` (4, 8, 16, ...).
pub fn stage_resolution(stage: usize) -> usize {
    BASE_RESOLUTION << stage
}

/// Channel width at stage `k`: `channels` at 4x4, halved per doubling of
/// resolution, clamped below at [`MIN_WIDTH`].
pub fn stage_width(channels: usize, stage: usize) -> usize {
    MIN_WIDTH.max(channels >> stage)
}

/// Widths for all stages of a network with `stages` resolutions.
pub fn stage_widths(channels: usize, stages: usize) -> Vec<usize> {
    (0..stages).map(|k| stage_width(channels, k)).collect()
}

/// Linear blend `alpha * new + (1 - alpha) * old` used while a freshly added
/// stage is faded in. The endpoints are exact: `alpha == 0.0` returns `old`
/// bit for bit and `alpha == 1.0` returns `new` bit for bit.
pub fn fade_in<F: Scalar>(old: &Array4<F>, new: &Array4<F>, alpha: f64) -> Result<Array4<F>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CipherError::Domain(format!(
            "fade alpha must lie in [0, 1], got {alpha}"
        )));
    }
    if old.dim() != new.dim() {
        return Err(CipherError::shape(
            "fade_in operands",
            format!("{:?}", old.dim()),
            format!("{:?}", new.dim()),
        ));
    }
    if alpha == 0.0 {
        return Ok(old.clone());
    }
    if alpha == 1.0 {
        return Ok(new.clone());
    }
    let a = F::from_f64(alpha);
    let b = F::one() - a;
    let mut out = new.clone();
    out.zip_mut_with(old, |n, &o| *n = *n * a + o * b);
    Ok(out)
}

/// Fade coefficient at iteration `iter` of a stage. Stage 0 has nothing to
/// fade and is always fully stable; later stages ramp linearly from 0 to 1
/// over the first `fade_iters` iterations and stay at 1 afterwards.
pub fn fade_alpha(stage: usize, iter: usize, fade_iters: usize) -> f64 {
    if stage == 0 || fade_iters == 0 {
        return 1.0;
    }
    (iter as f64 / fade_iters as f64).min(1.0)
}
