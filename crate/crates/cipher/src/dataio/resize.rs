//! Bicubic (Catmull-Rom) resampling, separable, with kernel widening when
//! minifying so downscales average rather than alias.

use ndarray::{Array2, Array3};

/// Catmull-Rom cubic kernel (a = -0.5).
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

struct Taps {
    /// For each output index: (first source index, weights).
    rows: Vec<(isize, Vec<f32>)>,
}

/// Precompute clamped, normalized filter taps for one axis.
fn plan_axis(in_len: usize, out_len: usize) -> Taps {
    let scale = in_len as f64 / out_len as f64;
    // widen the kernel when shrinking; keep unit support when enlarging
    let support_scale = scale.max(1.0);
    let radius = 2.0 * support_scale;
    let mut rows = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let center = (o as f64 + 0.5) * scale - 0.5;
        let lo = (center - radius).ceil() as isize;
        let hi = (center + radius).floor() as isize;
        let mut weights = Vec::with_capacity((hi - lo + 1) as usize);
        let mut sum = 0.0;
        for i in lo..=hi {
            let w = cubic_kernel((i as f64 - center) / support_scale);
            sum += w;
            weights.push(w);
        }
        let inv = 1.0 / sum;
        let weights: Vec<f32> = weights.iter().map(|w| (w * inv) as f32).collect();
        rows.push((lo, weights));
    }
    Taps { rows }
}

#[inline]
fn clamp_idx(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

fn resize_plane(src: &ndarray::ArrayView2<'_, f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (in_h, in_w) = src.dim();
    let hplan = plan_axis(in_w, out_w);
    let vplan = plan_axis(in_h, out_h);

    // horizontal pass
    let mut mid = Array2::<f32>::zeros((in_h, out_w));
    for y in 0..in_h {
        for (ox, (lo, ws)) in hplan.rows.iter().enumerate() {
            let mut acc = 0.0;
            for (k, &w) in ws.iter().enumerate() {
                acc += w * src[[y, clamp_idx(lo + k as isize, in_w)]];
            }
            mid[[y, ox]] = acc;
        }
    }
    // vertical pass
    let mut out = Array2::<f32>::zeros((out_h, out_w));
    for (oy, (lo, ws)) in vplan.rows.iter().enumerate() {
        for ox in 0..out_w {
            let mut acc = 0.0;
            for (k, &w) in ws.iter().enumerate() {
                acc += w * mid[[clamp_idx(lo + k as isize, in_h), ox]];
            }
            out[[oy, ox]] = acc;
        }
    }
    out
}

/// Resize a planar (c, h, w) image. Values pass through unchanged in range.
pub fn resize_bicubic(src: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, in_h, in_w) = src.dim();
    if in_h == out_h && in_w == out_w {
        return src.clone();
    }
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        out.index_axis_mut(ndarray::Axis(0), ch)
            .assign(&resize_plane(&src.index_axis(ndarray::Axis(0), ch), out_h, out_w));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 2-D evaluation of the same filter, no separability trick.
    fn resize_reference(src: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
        let (c, in_h, in_w) = src.dim();
        let sy = in_h as f64 / out_h as f64;
        let sx = in_w as f64 / out_w as f64;
        let ssy = sy.max(1.0);
        let ssx = sx.max(1.0);
        let mut out = Array3::zeros((c, out_h, out_w));
        for ch in 0..c {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let cy = (oy as f64 + 0.5) * sy - 0.5;
                    let cx = (ox as f64 + 0.5) * sx - 0.5;
                    let mut acc = 0.0;
                    let mut wsum = 0.0;
                    for iy in (cy - 2.0 * ssy).ceil() as isize..=(cy + 2.0 * ssy).floor() as isize
                    {
                        for ix in
                            (cx - 2.0 * ssx).ceil() as isize..=(cx + 2.0 * ssx).floor() as isize
                        {
                            let w = cubic_kernel((iy as f64 - cy) / ssy)
                                * cubic_kernel((ix as f64 - cx) / ssx);
                            wsum += w;
                            acc += w
                                * src[[ch, clamp_idx(iy, in_h), clamp_idx(ix, in_w)]] as f64;
                        }
                    }
                    out[[ch, oy, ox]] = (acc / wsum) as f32;
                }
            }
        }
        out
    }

    fn test_image(h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            let fy = y as f32 / h as f32;
            let fx = x as f32 / w as f32;
            127.5 + 80.0 * (6.0 * fy + c as f32).sin() * (5.0 * fx).cos()
                + 20.0 * ((x * 7 + y * 13 + c * 3) % 11) as f32 / 11.0
        })
    }

    #[test]
    fn kernel_basics() {
        assert_eq!(cubic_kernel(0.0), 1.0);
        assert_eq!(cubic_kernel(1.0), 0.0);
        assert_eq!(cubic_kernel(2.0), 0.0);
        assert_eq!(cubic_kernel(2.5), 0.0);
        assert!(cubic_kernel(0.5) > 0.0);
        assert!(cubic_kernel(1.5) < 0.0); // the negative lobe
        assert_eq!(cubic_kernel(-0.7), cubic_kernel(0.7));
    }

    #[test]
    fn matches_nonseparable_reference() {
        let img = test_image(24, 16);
        for &(oh, ow) in &[(8usize, 8usize), (12, 12), (32, 32), (6, 10)] {
            let a = resize_bicubic(&img, oh, ow);
            let b = resize_reference(&img, oh, ow);
            let max = a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(max < 1e-3, "{oh}x{ow}: max diff {max}");
        }
    }

    #[test]
    fn identity_when_same_size() {
        let img = test_image(16, 16);
        let out = resize_bicubic(&img, 16, 16);
        assert_eq!(out, img);
    }

    #[test]
    fn downscale_of_nn_upsample_recovers_original() {
        // smooth content: the identity only holds below the Nyquist limit
        // of the downscaled grid
        let small = Array3::from_shape_fn((3, 16, 16), |(c, y, x)| {
            let fy = y as f32 / 16.0;
            let fx = x as f32 / 16.0;
            127.5 + 80.0 * (6.0 * fy + c as f32).sin() * (5.0 * fx).cos()
        });
        // exact 2x nearest-neighbor upsample
        let big = Array3::from_shape_fn((3, 32, 32), |(c, y, x)| small[[c, y / 2, x / 2]]);
        let rec = resize_bicubic(&big, 16, 16);
        let max = rec
            .iter()
            .zip(small.iter())
            .map(|(a, b)| (a - b).abs() / 255.0)
            .fold(0.0f32, f32::max);
        assert!(max < 1e-2, "max relative error {max}");
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Array3::from_elem((3, 20, 20), 42.0f32);
        for &(oh, ow) in &[(8usize, 8usize), (40, 40), (13, 7)] {
            let out = resize_bicubic(&img, oh, ow);
            for &v in out.iter() {
                assert!((v - 42.0).abs() < 1e-4);
            }
        }
    }
}
