//! Deterministic synthetic image corpus: structured low-frequency scenes
//! (gradients, soft ellipses, vignette, mild noise) so desk-scale runs have
//! a learnable "real" distribution without shipping a dataset.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand_chacha::ChaCha12Rng;

use crate::error::{CipherError, Result};
use crate::nn::rng::{normal, seeded_stream_rng, uniform};

fn render_one(rng: &mut ChaCha12Rng, res: usize) -> Array3<f32> {
    let mut img = Array3::<f32>::zeros((3, res, res));
    let rf = res as f32;

    // sinusoidal background field shared across channels with per-channel gain
    let angle = uniform::<f64>(rng, 0.0, std::f64::consts::TAU) as f32;
    let freq = uniform::<f64>(rng, 0.5, 2.5) as f32;
    let phase = uniform::<f64>(rng, 0.0, std::f64::consts::TAU) as f32;
    let base: [f32; 3] = [
        uniform::<f64>(rng, 60.0, 200.0) as f32,
        uniform::<f64>(rng, 60.0, 200.0) as f32,
        uniform::<f64>(rng, 60.0, 200.0) as f32,
    ];
    let gain: [f32; 3] = [
        uniform::<f64>(rng, 10.0, 55.0) as f32,
        uniform::<f64>(rng, 10.0, 55.0) as f32,
        uniform::<f64>(rng, 10.0, 55.0) as f32,
    ];
    let (ca, sa) = (angle.cos(), angle.sin());
    for y in 0..res {
        for x in 0..res {
            let u = x as f32 / rf - 0.5;
            let v = y as f32 / rf - 0.5;
            let t = (u * ca + v * sa) * freq * std::f32::consts::TAU + phase;
            let s = t.sin();
            for c in 0..3 {
                img[[c, y, x]] = base[c] + gain[c] * s;
            }
        }
    }

    // 1..3 soft ellipses
    let n_shapes = 1 + (uniform::<f64>(rng, 0.0, 3.0) as usize).min(2);
    for _ in 0..n_shapes {
        let cx = uniform::<f64>(rng, 0.2, 0.8) as f32;
        let cy = uniform::<f64>(rng, 0.2, 0.8) as f32;
        let rx = uniform::<f64>(rng, 0.08, 0.35) as f32;
        let ry = uniform::<f64>(rng, 0.08, 0.35) as f32;
        let soft = uniform::<f64>(rng, 0.05, 0.2) as f32;
        let color: [f32; 3] = [
            uniform::<f64>(rng, 20.0, 235.0) as f32,
            uniform::<f64>(rng, 20.0, 235.0) as f32,
            uniform::<f64>(rng, 20.0, 235.0) as f32,
        ];
        for y in 0..res {
            for x in 0..res {
                let dx = (x as f32 / rf - cx) / rx;
                let dy = (y as f32 / rf - cy) / ry;
                let d = (dx * dx + dy * dy).sqrt();
                // smooth falloff from 1 inside to 0 outside
                let a = (1.0 - (d - 1.0) / soft).clamp(0.0, 1.0);
                if a > 0.0 {
                    for c in 0..3 {
                        img[[c, y, x]] = img[[c, y, x]] * (1.0 - a) + color[c] * a;
                    }
                }
            }
        }
    }

    // vignette and pixel noise
    let vig = uniform::<f64>(rng, 0.1, 0.35) as f32;
    for y in 0..res {
        for x in 0..res {
            let u = x as f32 / rf - 0.5;
            let v = y as f32 / rf - 0.5;
            let fall = 1.0 - vig * (u * u + v * v) * 4.0;
            for c in 0..3 {
                let noise = normal::<f32>(rng) * 2.0;
                img[[c, y, x]] = (img[[c, y, x]] * fall + noise).clamp(0.0, 255.0);
            }
        }
    }
    img
}

/// Generate `n` PNG images of side `res` into `dir`. Deterministic in
/// (seed, n, res); regenerating into an existing directory rewrites the same
/// bytes. Returns the file paths in index order.
pub fn generate_corpus(dir: &Path, n: usize, res: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| CipherError::io(dir, e))?;
    let mut paths = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = seeded_stream_rng(seed, "synth", i as u64);
        let img = render_one(&mut rng, res);
        let path = dir.join(format!("synth_{i:05}.png"));
        let mut buf = image::RgbImage::new(res as u32, res as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            for c in 0..3 {
                px.0[c] = img[[c, y as usize, x as usize]].round().clamp(0.0, 255.0) as u8;
            }
        }
        buf.save(&path).map_err(|e| CipherError::Image {
            path: path.clone(),
            source: e,
        })?;
        paths.push(path);
    }
    Ok(paths)
}
