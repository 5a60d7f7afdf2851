//! Normalization layers: group normalization (U-Net) and pixelwise feature
//! normalization (GAN generator).

use ndarray::{Array1, Array3, Array4};

use super::param::{param_entry, Layer, Mode, ParamFn, ParamSet};
use super::scalar::Scalar;

/// Largest divisor of `c` that is at most `min(32, c)`.
pub fn choose_groups(c: usize) -> usize {
    let mut g = 32.min(c);
    while c % g != 0 {
        g -= 1;
    }
    g
}

pub struct GroupNorm<F: Scalar> {
    pub groups: usize,
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub ggamma: Array1<F>,
    pub gbeta: Array1<F>,
    pub eps: F,
    cache: Option<GnCache<F>>,
}

struct GnCache<F> {
    xhat: Array4<F>,
    inv_std: ndarray::Array2<F>, // (n, groups)
}

impl<F: Scalar> GroupNorm<F> {
    pub fn new(channels: usize) -> Self {
        GroupNorm {
            groups: choose_groups(channels),
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            ggamma: Array1::zeros(channels),
            gbeta: Array1::zeros(channels),
            eps: F::from_f64(1e-5),
            cache: None,
        }
    }
}

impl<F: Scalar> ParamSet<F> for GroupNorm<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        f(param_entry(
            super::param::join(prefix, "gamma"),
            &mut self.gamma,
            &mut self.ggamma,
            true,
        ));
        f(param_entry(
            super::param::join(prefix, "beta"),
            &mut self.beta,
            &mut self.gbeta,
            true,
        ));
    }
}

impl<F: Scalar> Layer<F> for GroupNorm<F> {
    fn forward(&mut self, x: Array4<F>, _mode: Mode) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c % self.groups, 0, "group_norm channels not divisible");
        assert_eq!(c, self.gamma.len(), "group_norm channel mismatch");
        let cg = c / self.groups;
        let m = F::from_f64((cg * h * w) as f64);

        let mut xhat = Array4::zeros((n, c, h, w));
        let mut inv_std = ndarray::Array2::zeros((n, self.groups));
        for i in 0..n {
            for g in 0..self.groups {
                let sl = ndarray::s![i, g * cg..(g + 1) * cg, .., ..];
                let xg = x.slice(sl);
                let mean = xg.sum() / m;
                let mut var = F::zero();
                for &v in xg.iter() {
                    let d = v - mean;
                    var = var + d * d;
                }
                var = var / m;
                let istd = F::one() / (var + self.eps).sqrt();
                inv_std[[i, g]] = istd;
                let mut xh = xhat.slice_mut(sl);
                xh.assign(&xg);
                xh.mapv_inplace(|v| (v - mean) * istd);
            }
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let ga = self.gamma[ci];
            let be = self.beta[ci];
            y.slice_mut(ndarray::s![.., ci, .., ..])
                .mapv_inplace(|v| ga * v + be);
        }
        self.cache = Some(GnCache { xhat, inv_std });
        y
    }

    fn backward(&mut self, gy: Array4<F>) -> Array4<F> {
        let cache = self.cache.take().expect("group_norm backward");
        let (n, c, h, w) = gy.dim();
        let cg = c / self.groups;
        let m = F::from_f64((cg * h * w) as f64);

        for ci in 0..c {
            let gys = gy.slice(ndarray::s![.., ci, .., ..]);
            let xhs = cache.xhat.slice(ndarray::s![.., ci, .., ..]);
            self.ggamma[ci] = self.ggamma[ci] + (&gys * &xhs).sum();
            self.gbeta[ci] = self.gbeta[ci] + gys.sum();
        }

        let mut gx = Array4::zeros((n, c, h, w));
        for i in 0..n {
            for g in 0..self.groups {
                let sl = ndarray::s![i, g * cg..(g + 1) * cg, .., ..];
                let xh = cache.xhat.slice(sl);
                // gxhat = gy * gamma (per channel)
                let mut gxh = gy.slice(sl).to_owned();
                for (k, mut plane) in gxh.outer_iter_mut().enumerate() {
                    let ga = self.gamma[g * cg + k];
                    plane.mapv_inplace(|v| v * ga);
                }
                let mean_g = gxh.sum() / m;
                let mean_gx = (&gxh * &xh).sum() / m;
                let istd = cache.inv_std[[i, g]];
                let mut out = gx.slice_mut(sl);
                ndarray::Zip::from(&mut out)
                    .and(&gxh)
                    .and(&xh)
                    .for_each(|o, &gv, &xv| {
                        *o = istd * (gv - mean_g - xv * mean_gx);
                    });
            }
        }
        gx
    }
}

/// Normalizes each pixel's feature vector to unit RMS length.
pub struct PixelNorm<F: Scalar> {
    pub eps: F,
    cache: Option<PnCache<F>>,
}

struct PnCache<F> {
    u: Array4<F>,
    d: Array3<F>, // (n, h, w)
}

impl<F: Scalar> PixelNorm<F> {
    pub fn new() -> Self {
        PixelNorm {
            eps: F::from_f64(1e-8),
            cache: None,
        }
    }
}

impl<F: Scalar> Default for PixelNorm<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> for PixelNorm<F> {
    fn visit_params(&mut self, _prefix: &str, _f: &mut ParamFn<'_, F>) {}
}

impl<F: Scalar> Layer<F> for PixelNorm<F> {
    fn forward(&mut self, x: Array4<F>, _mode: Mode) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        let cf = F::from_f64(c as f64);
        let mut u = Array4::zeros((n, c, h, w));
        let mut d = Array3::zeros((n, h, w));
        for i in 0..n {
            for r in 0..h {
                for cl in 0..w {
                    let mut s = F::zero();
                    for ci in 0..c {
                        let v = x[[i, ci, r, cl]];
                        s = s + v * v;
                    }
                    let dv = (s / cf + self.eps).sqrt();
                    d[[i, r, cl]] = dv;
                    for ci in 0..c {
                        u[[i, ci, r, cl]] = x[[i, ci, r, cl]] / dv;
                    }
                }
            }
        }
        self.cache = Some(PnCache { u: u.clone(), d });
        u
    }

    fn backward(&mut self, gy: Array4<F>) -> Array4<F> {
        let cache = self.cache.take().expect("pixel_norm backward");
        let (n, c, h, w) = gy.dim();
        let cf = F::from_f64(c as f64);
        let mut gx = Array4::zeros((n, c, h, w));
        for i in 0..n {
            for r in 0..h {
                for cl in 0..w {
                    let dv = cache.d[[i, r, cl]];
                    let mut dot = F::zero();
                    for ci in 0..c {
                        dot = dot + gy[[i, ci, r, cl]] * cache.u[[i, ci, r, cl]];
                    }
                    let coef = dot / (cf * dv);
                    for ci in 0..c {
                        gx[[i, ci, r, cl]] =
                            gy[[i, ci, r, cl]] / dv - cache.u[[i, ci, r, cl]] * coef;
                    }
                }
            }
        }
        gx
    }
}
