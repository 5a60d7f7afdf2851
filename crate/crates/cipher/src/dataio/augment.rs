//! Training-time augmentation: horizontal flips and photometric jitter.
//! Geometric transforms beyond the flip are deliberately not implemented.

use ndarray::Array4;
use rand_chacha::ChaCha12Rng;

use crate::error::{CipherError, Result};
use crate::nn::rng::uniform;
use crate::nn::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    /// Brightness/contrast/saturation factors drawn from [1-s, 1+s].
    pub jitter_strength: f64,
}

impl AugmentConfig {
    pub fn new(hflip_prob: f64, jitter_strength: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&hflip_prob) {
            return Err(CipherError::Config(format!(
                "hflip_prob must be in [0,1], got {hflip_prob}"
            )));
        }
        if jitter_strength < 0.0 {
            return Err(CipherError::Config(format!(
                "jitter_strength must be >= 0, got {jitter_strength}"
            )));
        }
        Ok(AugmentConfig {
            hflip_prob,
            jitter_strength,
        })
    }
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114]; // Rec. 601

/// Flip a single sample of a batch in place along the width axis.
fn hflip_sample<F: Scalar>(batch: &mut Array4<F>, i: usize) {
    let (_, c, h, w) = batch.dim();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w / 2 {
                let a = batch[[i, ch, y, x]];
                let b = batch[[i, ch, y, w - 1 - x]];
                batch[[i, ch, y, x]] = b;
                batch[[i, ch, y, w - 1 - x]] = a;
            }
        }
    }
}

/// Augment a batch in place. Per sample, four values are always drawn from
/// the rng in a fixed order -- flip coin, brightness, contrast, saturation --
/// so the random stream advances identically regardless of configuration.
/// Jitter is applied in [0,1] intensity space; output re-clamped to [-1,1].
pub fn augment<F: Scalar>(batch: &mut Array4<F>, cfg: &AugmentConfig, rng: &mut ChaCha12Rng) {
    let (n, c, h, w) = batch.dim();
    assert_eq!(c, 3, "augment expects RGB batches");
    let s = cfg.jitter_strength;
    for i in 0..n {
        // four unit draws per sample, unconditionally, so the stream
        // position is independent of the configuration
        let flip_coin = uniform::<f64>(rng, 0.0, 1.0);
        let factor = |u: f64| 1.0 - s + u * 2.0 * s;
        let fb = factor(uniform::<f64>(rng, 0.0, 1.0));
        let fc = factor(uniform::<f64>(rng, 0.0, 1.0));
        let fs = factor(uniform::<f64>(rng, 0.0, 1.0));

        if flip_coin < cfg.hflip_prob {
            hflip_sample(batch, i);
        }
        if s == 0.0 {
            continue;
        }

        // work in [0,1] space
        let mut u = vec![0.0f64; 3 * h * w];
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    u[(ch * h + y) * w + x] =
                        (batch[[i, ch, y, x]].to_f64() + 1.0) * 0.5;
                }
            }
        }
        // brightness: scale everything
        for v in u.iter_mut() {
            *v *= fb;
        }
        // contrast: scale the spread around the mean luma
        let mut mean_luma = 0.0;
        for y in 0..h {
            for x in 0..w {
                let mut l = 0.0;
                for ch in 0..3 {
                    l += LUMA[ch] * u[(ch * h + y) * w + x];
                }
                mean_luma += l;
            }
        }
        mean_luma /= (h * w) as f64;
        for v in u.iter_mut() {
            *v = (*v - mean_luma) * fc + mean_luma;
        }
        // saturation: interpolate between per-pixel luma and the color
        for y in 0..h {
            for x in 0..w {
                let mut l = 0.0;
                for ch in 0..3 {
                    l += LUMA[ch] * u[(ch * h + y) * w + x];
                }
                for ch in 0..3 {
                    let idx = (ch * h + y) * w + x;
                    u[idx] = l + (u[idx] - l) * fs;
                }
            }
        }
        // back to [-1,1], clamped
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = (u[(ch * h + y) * w + x] * 2.0 - 1.0).clamp(-1.0, 1.0);
                    batch[[i, ch, y, x]] = F::from_f64(v);
                }
            }
        }
    }
}
