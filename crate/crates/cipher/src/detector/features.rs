//! Multi-depth feature extraction from frozen backbones. Activations are
//! captured after a named block, global-average-pooled over the spatial
//! dims, and exported per image for offline analysis; they do not feed the
//! decision path.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Array4};

use crate::diffusion::UNet;
use crate::error::{CipherError, Result};
use crate::nn::{Mode, Scalar};
use crate::progan::{Discriminator, ProgressiveStage};

/// Depth id → (n_images, channels) matrix of pooled activations.
#[derive(Debug, Clone, Default)]
pub struct FeatureBundle {
    pub features: BTreeMap<String, Array2<f64>>,
}

impl FeatureBundle {
    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn depth_ids(&self) -> Vec<&str> {
        self.features.keys().map(String::as_str).collect()
    }
}

/// Global average pool: (n, c, h, w) → (n, c) means in double precision.
fn gap<F: Scalar>(x: &Array4<F>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let denom = (h * w) as f64;
    let mut out = Array2::zeros((n, c));
    for i in 0..n {
        for ch in 0..c {
            let mut acc = 0.0;
            for r in 0..h {
                for cl in 0..w {
                    acc += x[[i, ch, r, cl]].to_f64();
                }
            }
            out[[i, ch]] = acc / denom;
        }
    }
    out
}

fn collect_requested(
    depths: &[String],
    captured: BTreeMap<String, Array2<f64>>,
    available: Vec<String>,
) -> Result<FeatureBundle> {
    let mut features = BTreeMap::new();
    for d in depths {
        match captured.get(d) {
            Some(m) => {
                features.insert(d.clone(), m.clone());
            }
            None => {
                return Err(CipherError::Config(format!(
                    "unknown feature depth '{d}'; available: {}",
                    available.join(", ")
                )));
            }
        }
    }
    Ok(FeatureBundle { features })
}

/// Pooled activations after each requested discriminator block, at the
/// detector's full resolution in eval mode. Valid depth ids are the trunk's
/// tap names: `from_rgb{k}` and `block{k}..block1` for a stage-`k` network.
pub fn extract_disc_features<F: Scalar>(
    disc: &mut Discriminator<F>,
    images: &Array4<F>,
    depths: &[String],
) -> Result<FeatureBundle> {
    if depths.is_empty() {
        return Ok(FeatureBundle::default());
    }
    let stage = ProgressiveStage::new(disc.stages - 1, 1.0)?;
    let mut captured = BTreeMap::new();
    let mut available = Vec::new();
    disc.backbone_tapped(images, stage, Mode::Eval, &mut |name, h| {
        available.push(name.to_string());
        captured.insert(name.to_string(), gap(h));
    })?;
    collect_requested(depths, captured, available)
}

/// Pooled activations from the denoiser's encoder at a fixed probe timestep
/// (conventionally half the schedule). Valid depth ids: `stem` and `enc{i}`.
pub fn extract_unet_features<F: Scalar>(
    net: &mut UNet<F>,
    images: &Array4<F>,
    t_probe: usize,
    depths: &[String],
) -> Result<FeatureBundle> {
    if depths.is_empty() {
        return Ok(FeatureBundle::default());
    }
    let t = vec![t_probe; images.dim().0];
    let mut captured = BTreeMap::new();
    let mut available = Vec::new();
    net.encoder_tapped(images, &t, Mode::Eval, &mut |name, h| {
        available.push(name.to_string());
        captured.insert(name.to_string(), gap(h));
    })?;
    collect_requested(depths, captured, available)
}

/// Write one CSV row per (image, depth): `image,depth,dim,values` with the
/// vector space-separated. Depths iterate in sorted order, images in the
/// order of `ids`.
pub fn write_features_csv(path: &Path, ids: &[String], bundle: &FeatureBundle) -> Result<()> {
    for (depth, m) in &bundle.features {
        if m.dim().0 != ids.len() {
            return Err(CipherError::shape(
                format!("feature rows for depth '{depth}'"),
                ids.len(),
                m.dim().0,
            ));
        }
    }
    let mut out = BufWriter::new(File::create(path).map_err(|e| CipherError::io(path, e))?);
    writeln!(out, "image,depth,dim,values").map_err(|e| CipherError::io(path, e))?;
    for (depth, m) in &bundle.features {
        for (i, id) in ids.iter().enumerate() {
            let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:.8e}")).collect();
            writeln!(out, "{id},{depth},{},{}", m.dim().1, row.join(" "))
                .map_err(|e| CipherError::io(path, e))?;
        }
    }
    out.flush().map_err(|e| CipherError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::UNetSpec;
    use crate::nn::rng::{randn4, seeded_rng};
    use tempfile::TempDir;

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn empty_request_is_empty_bundle() {
        let mut rng = seeded_rng(1, "feat");
        let mut disc: Discriminator<f32> = Discriminator::new(16, 3, &mut rng).unwrap();
        let x = randn4::<f32>(&mut rng, (2, 3, 16, 16));
        let b = extract_disc_features(&mut disc, &x, &[]).unwrap();
        assert!(b.is_empty());
    }

    #[test]
    fn depth_vectors_match_block_widths() {
        let mut rng = seeded_rng(2, "feat");
        // widths per stage: [16, 8, 4]; taps produce from_rgb2 (4 channels),
        // block2 (8), block1 (16).
        let mut disc: Discriminator<f32> = Discriminator::new(16, 3, &mut rng).unwrap();
        let x = randn4::<f32>(&mut rng, (3, 3, 16, 16));
        let b = extract_disc_features(
            &mut disc,
            &x,
            &strs(&["from_rgb2", "block2", "block1"]),
        )
        .unwrap();
        assert_eq!(b.features["from_rgb2"].dim(), (3, 4));
        assert_eq!(b.features["block2"].dim(), (3, 8));
        assert_eq!(b.features["block1"].dim(), (3, 16));
    }

    #[test]
    fn identical_images_give_identical_rows() {
        let mut rng = seeded_rng(3, "feat");
        let mut disc: Discriminator<f32> = Discriminator::new(8, 2, &mut rng).unwrap();
        let one = randn4::<f32>(&mut rng, (1, 3, 8, 8));
        let mut x = Array4::<f32>::zeros((2, 3, 8, 8));
        x.index_axis_mut(ndarray::Axis(0), 0).assign(&one.index_axis(ndarray::Axis(0), 0));
        x.index_axis_mut(ndarray::Axis(0), 1).assign(&one.index_axis(ndarray::Axis(0), 0));
        let b = extract_disc_features(&mut disc, &x, &strs(&["block1"])).unwrap();
        let m = &b.features["block1"];
        assert_eq!(m.row(0), m.row(1));
    }

    #[test]
    fn unknown_depth_is_config_error() {
        let mut rng = seeded_rng(4, "feat");
        let mut disc: Discriminator<f32> = Discriminator::new(8, 2, &mut rng).unwrap();
        let x = randn4::<f32>(&mut rng, (1, 3, 8, 8));
        let err = extract_disc_features(&mut disc, &x, &strs(&["block9"])).unwrap_err();
        match err {
            CipherError::Config(msg) => {
                assert!(msg.contains("block9"));
                assert!(msg.contains("block1"), "{msg}");
            }
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn unet_encoder_features_have_level_widths() {
        let spec = UNetSpec {
            input_res: 8,
            base_channels: 2,
            multipliers: vec![1, 2],
            attention_resolutions: vec![],
        };
        let mut rng = seeded_rng(5, "feat");
        let mut net: UNet<f32> = UNet::new(spec, &mut rng).unwrap();
        let x = randn4::<f32>(&mut rng, (2, 3, 8, 8));
        let b = extract_unet_features(&mut net, &x, 10, &strs(&["stem", "enc0", "enc1"])).unwrap();
        assert_eq!(b.features["stem"].dim(), (2, 2));
        assert_eq!(b.features["enc0"].dim(), (2, 2));
        assert_eq!(b.features["enc1"].dim(), (2, 4));

        // Deterministic on repeat.
        let b2 = extract_unet_features(&mut net, &x, 10, &strs(&["enc1"])).unwrap();
        assert_eq!(b.features["enc1"], b2.features["enc1"]);
    }

    #[test]
    fn csv_export_round_trips_shape() {
        let tmp = TempDir::new().unwrap();
        let mut rng = seeded_rng(6, "feat");
        let mut disc: Discriminator<f32> = Discriminator::new(8, 2, &mut rng).unwrap();
        let x = randn4::<f32>(&mut rng, (2, 3, 8, 8));
        let b = extract_disc_features(&mut disc, &x, &strs(&["block1", "from_rgb1"])).unwrap();

        let ids = strs(&["a.png", "b.png"]);
        let path = tmp.path().join("features.csv");
        write_features_csv(&path, &ids, &b).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "image,depth,dim,values");
        // 2 depths x 2 images
        assert_eq!(lines.len(), 5);
        let fields: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(fields[0], "a.png");
        assert_eq!(fields[1], "block1");
        let dim: usize = fields[2].parse().unwrap();
        assert_eq!(fields[3].split(' ').count(), dim);

        // Mismatched id count is a shape error.
        let bad_ids = strs(&["only-one.png"]);
        assert!(matches!(
            write_features_csv(&tmp.path().join("x.csv"), &bad_ids, &b),
            Err(CipherError::Shape { .. })
        ));
    }
}
