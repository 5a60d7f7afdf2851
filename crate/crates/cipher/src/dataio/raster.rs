//! Image decode/encode and the raster-to-tensor preprocessing step.

use std::path::Path;

use ndarray::{Array3, Array4};

use crate::error::{CipherError, Result};
use crate::nn::scalar::Scalar;

/// Decoded RGB image, planar layout (3, h, w), values in [0, 255].
#[derive(Debug, Clone)]
pub struct Raster {
    pub data: Array3<f32>,
}

impl Raster {
    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

/// Decode a PNG or JPEG file. Grayscale inputs are replicated to RGB.
pub fn decode(path: &Path) -> Result<Raster> {
    let img = image::open(path).map_err(|e| CipherError::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 {
        return Err(CipherError::RejectedInput(format!(
            "zero-dimension image: {}",
            path.display()
        )));
    }
    let mut data = Array3::zeros((3, h, w));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[[c, y as usize, x as usize]] = px.0[c] as f32;
        }
    }
    Ok(Raster { data })
}

/// Crop the central square from a non-square raster.
pub fn center_crop_square(r: &Raster) -> Raster {
    let (h, w) = (r.height(), r.width());
    if h == w {
        return r.clone();
    }
    let s = h.min(w);
    let y0 = (h - s) / 2;
    let x0 = (w - s) / 2;
    Raster {
        data: r
            .data
            .slice(ndarray::s![.., y0..y0 + s, x0..x0 + s])
            .to_owned(),
    }
}

pub const VALID_RESOLUTIONS: [usize; 5] = [4, 8, 16, 32, 64];

/// Full preprocessing: center-crop to square, bicubic resize to
/// `target_res`, and map [0,255] linearly onto [-1,1].
pub fn preprocess(r: &Raster, target_res: usize) -> Result<Array3<f32>> {
    if !VALID_RESOLUTIONS.contains(&target_res) {
        return Err(CipherError::Domain(format!(
            "target resolution {target_res} not in {VALID_RESOLUTIONS:?}"
        )));
    }
    if r.height() == 0 || r.width() == 0 {
        return Err(CipherError::RejectedInput("zero-dimension image".into()));
    }
    let square = center_crop_square(r);
    let resized = super::resize::resize_bicubic(&square.data, target_res, target_res);
    Ok(resized.mapv(|v| v / 127.5 - 1.0))
}

/// Convert one [-1,1] CHW tensor to 8-bit and write it as a PNG.
pub fn save_png<F: Scalar>(tensor: &ndarray::ArrayView3<'_, F>, path: &Path) -> Result<()> {
    let (c, h, w) = tensor.dim();
    assert_eq!(c, 3, "expected RGB tensor");
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = (tensor[[ch, y as usize, x as usize]].to_f64() + 1.0) * 127.5;
            px.0[ch] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    buf.save(path).map_err(|e| CipherError::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Batch-level shape/range validation for preprocessed tensors.
pub fn validate_batch<F: Scalar>(batch: &Array4<F>) -> Result<()> {
    let (_, c, h, w) = batch.dim();
    if c != 3 {
        return Err(CipherError::shape("image batch channels", 3, c));
    }
    if h != w || !VALID_RESOLUTIONS.contains(&h) {
        return Err(CipherError::shape(
            "image batch spatial dims",
            format!("square in {VALID_RESOLUTIONS:?}"),
            format!("{h}x{w}"),
        ));
    }
    let one = F::one();
    if batch.iter().any(|&v| v > one || v < -one || !v.to_f64().is_finite()) {
        return Err(CipherError::Domain(
            "image batch has values outside [-1,1]".to_string(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midgray_maps_to_zero() {
        let r = Raster {
            data: Array3::from_elem((3, 8, 8), 127.5),
        };
        let t = preprocess(&r, 8).unwrap();
        assert!(t.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_to_target_shape() {
        let r = Raster {
            data: Array3::from_elem((3, 128, 128), 40.0),
        };
        let t = preprocess(&r, 64).unwrap();
        assert_eq!(t.dim(), (3, 64, 64));
    }

    #[test]
    fn center_crop_uses_middle() {
        // 4 wide, 2 tall; center 2x2 is columns 1..3
        let mut data = Array3::zeros((3, 2, 4));
        for x in 0..4 {
            data[[0, 0, x]] = x as f32;
        }
        let cropped = center_crop_square(&Raster { data });
        assert_eq!(cropped.data.dim(), (3, 2, 2));
        assert_eq!(cropped.data[[0, 0, 0]], 1.0);
        assert_eq!(cropped.data[[0, 0, 1]], 2.0);
    }

    #[test]
    fn rejects_bad_resolution() {
        let r = Raster {
            data: Array3::zeros((3, 8, 8)),
        };
        assert!(preprocess(&r, 7).is_err());
        assert!(preprocess(&r, 128).is_err());
    }

    #[test]
    fn png_roundtrip_preserves_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.png");
        let t = Array3::<f32>::from_shape_fn((3, 8, 8), |(c, y, x)| {
            ((c * 83 + y * 17 + x * 3) % 255) as f32 / 127.5 - 1.0
        });
        save_png(&t.view(), &p).unwrap();
        let back = decode(&p).unwrap();
        // quantization error at most half a step of 2/255
        for (a, b) in t.iter().zip(back.data.iter()) {
            assert!((a - (b / 127.5 - 1.0)).abs() < 1.0 / 127.5 + 1e-6);
        }
    }

    #[test]
    fn grayscale_replicates_channels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let img = image::GrayImage::from_fn(6, 6, |x, y| image::Luma([(x * 20 + y) as u8]));
        img.save(&p).unwrap();
        let r = decode(&p).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(r.data[[0, y, x]], r.data[[1, y, x]]);
                assert_eq!(r.data[[1, y, x]], r.data[[2, y, x]]);
            }
        }
    }

    #[test]
    fn validate_batch_catches_out_of_range() {
        let mut b = Array4::<f32>::zeros((2, 3, 8, 8));
        validate_batch(&b).unwrap();
        b[[0, 0, 0, 0]] = 1.5;
        assert!(validate_batch(&b).is_err());
        let bad_shape = Array4::<f32>::zeros((2, 3, 7, 7));
        assert!(validate_batch(&bad_shape).is_err());
    }
}
