//! 2-D convolution with manual backprop, via im2col and GEMM.
//!
//! Supports the equalized-learning-rate variant used by the progressive GAN:
//! weights are stored at unit variance and multiplied by `sqrt(2 / fan_in)`
//! at forward time, so the stored tensors stay well-scaled for Adam while
//! the effective weights match He initialization.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayViewMut2};
use rand_chacha::ChaCha12Rng;

use super::param::{param_entry, Layer, Mode, ParamFn, ParamSet};
use super::rng::normal;
use super::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvInit {
    /// Store N(0,1) weights, apply `sqrt(2/fan_in)` at forward time.
    WeightScaled,
    /// Store He-normal weights, runtime scale 1.
    HeNormal,
    /// Zero weights (used for the last conv of residual blocks and heads).
    Zero,
}

pub struct Conv2d<F: Scalar> {
    pub w: Array4<F>, // (out_c, in_c, k, k)
    pub b: Array1<F>,
    pub gw: Array4<F>,
    pub gb: Array1<F>,
    pub stride: usize,
    pub pad: usize,
    pub runtime_scale: F,
    cache: Option<ConvCache<F>>,
}

struct ConvCache<F> {
    cols: Vec<Array2<F>>, // per sample, (in_c*k*k, oh*ow)
    in_shape: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: ConvInit,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let fan_in = in_c * k * k;
        let he = (2.0 / fan_in as f64).sqrt();
        let w = match init {
            ConvInit::WeightScaled | ConvInit::HeNormal => {
                let std = if init == ConvInit::WeightScaled { 1.0 } else { he };
                Array4::from_shape_fn((out_c, in_c, k, k), |_| {
                    F::from_f64(std) * normal::<F>(rng)
                })
            }
            ConvInit::Zero => Array4::zeros((out_c, in_c, k, k)),
        };
        let runtime_scale = if init == ConvInit::WeightScaled {
            F::from_f64(he)
        } else {
            F::one()
        };
        Conv2d {
            w,
            b: Array1::zeros(out_c),
            gw: Array4::zeros((out_c, in_c, k, k)),
            gb: Array1::zeros(out_c),
            stride,
            pad,
            runtime_scale,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.w.shape()[2]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn w_mat(&self) -> ArrayView2<'_, F> {
        let (oc, ic, kh, kw) = self.w.dim();
        ArrayView2::from_shape((oc, ic * kh * kw), self.w.as_slice().unwrap()).unwrap()
    }

    /// Effective weight matrix (runtime scale folded in).
    fn w_mat_scaled(&self) -> Array2<F> {
        let mut m = self.w_mat().to_owned();
        if self.runtime_scale != F::one() {
            m.mapv_inplace(|v| v * self.runtime_scale);
        }
        m
    }

    /// Forward pass on an explicitly supplied feature map, fallible variant
    /// used at module boundaries where a channel mismatch is user error.
    pub fn forward_checked(
        &mut self,
        x: &Array4<F>,
        mode: Mode,
    ) -> crate::error::Result<Array4<F>> {
        let (_, c, _, _) = x.dim();
        if c != self.in_channels() {
            return Err(crate::error::CipherError::shape(
                "conv2d input channels",
                self.in_channels(),
                c,
            ));
        }
        Ok(self.run_forward(x, mode))
    }

    fn run_forward(&mut self, x: &Array4<F>, _mode: Mode) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv2d channel mismatch");
        let k = self.kernel();
        let (oh, ow) = self.out_hw(h, w);
        let oc = self.out_channels();
        let wm = self.w_mat_scaled();

        let mut y = Array4::zeros((n, oc, oh, ow));
        let mut cols = Vec::with_capacity(n);
        for i in 0..n {
            let col = im2col(&x.index_axis(ndarray::Axis(0), i), k, self.stride, self.pad);
            {
                let ys = y.index_axis_mut(ndarray::Axis(0), i);
                let mut ym =
                    ArrayViewMut2::from_shape((oc, oh * ow), ys.into_slice().unwrap()).unwrap();
                general_mat_mul(F::one(), &wm, &col, F::zero(), &mut ym);
            }
            cols.push(col);
        }
        for o in 0..oc {
            let bo = self.b[o];
            y.slice_mut(ndarray::s![.., o, .., ..]).mapv_inplace(|v| v + bo);
        }
        self.cache = Some(ConvCache {
            cols,
            in_shape: (n, c, h, w),
            out_hw: (oh, ow),
        });
        y
    }

    fn run_backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let cache = self.cache.take().expect("conv2d backward without forward");
        let (n, c, h, w) = cache.in_shape;
        let (oh, ow) = cache.out_hw;
        let oc = self.out_channels();
        let k = self.kernel();
        let ickk = c * k * k;
        assert_eq!(gy.dim(), (n, oc, oh, ow), "conv2d grad shape");

        let wm = self.w_mat_scaled();
        let mut gw_mat = Array2::<F>::zeros((oc, ickk));
        let mut gx = Array4::zeros((n, c, h, w));
        for i in 0..n {
            let gys = gy.index_axis(ndarray::Axis(0), i);
            let gym = ArrayView2::from_shape((oc, oh * ow), gys.to_slice().unwrap()).unwrap();
            general_mat_mul(F::one(), &gym, &cache.cols[i].t(), F::one(), &mut gw_mat);
            let mut gcol = Array2::<F>::zeros((ickk, oh * ow));
            general_mat_mul(F::one(), &wm.t(), &gym, F::zero(), &mut gcol);
            col2im(
                &gcol,
                gx.index_axis_mut(ndarray::Axis(0), i),
                k,
                self.stride,
                self.pad,
            );
            for o in 0..oc {
                self.gb[o] = self.gb[o] + gys.index_axis(ndarray::Axis(0), o).sum();
            }
        }
        // d/d(stored w) = scale * d/d(effective w)
        let scale = self.runtime_scale;
        let gws = self.gw.as_slice_mut().unwrap();
        for (dst, src) in gws.iter_mut().zip(gw_mat.as_slice().unwrap()) {
            *dst = *dst + scale * *src;
        }
        gx
    }
}

impl<F: Scalar> ParamSet<F> for Conv2d<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        f(param_entry(
            super::param::join(prefix, "w"),
            &mut self.w,
            &mut self.gw,
            true,
        ));
        f(param_entry(
            super::param::join(prefix, "b"),
            &mut self.b,
            &mut self.gb,
            true,
        ));
    }
}

impl<F: Scalar> Layer<F> for Conv2d<F> {
    fn forward(&mut self, x: Array4<F>, mode: Mode) -> Array4<F> {
        self.run_forward(&x, mode)
    }

    fn backward(&mut self, gy: Array4<F>) -> Array4<F> {
        self.run_backward(&gy)
    }
}

fn im2col<F: Scalar>(
    x: &ndarray::ArrayView3<'_, F>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut col = Array2::<F>::zeros((c * k * k, oh * ow));
    let xs = x.to_slice().expect("im2col input not contiguous");
    let cs = col.as_slice_mut().unwrap();
    for ci in 0..c {
        for u in 0..k {
            for v in 0..k {
                let row = (ci * k + u) * k + v;
                let base = row * oh * ow;
                for o_r in 0..oh {
                    let ih = (o_r * stride + u) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let xrow = (ci * h + ih as usize) * w;
                    let crow = base + o_r * ow;
                    if stride == 1 {
                        // contiguous span: ow_idx + v - pad in [0, w)
                        let lo = pad.saturating_sub(v);
                        let hi = (w + pad - v).min(ow);
                        if lo < hi {
                            let src = xrow + lo + v - pad;
                            cs[crow + lo..crow + hi]
                                .copy_from_slice(&xs[src..src + (hi - lo)]);
                        }
                    } else {
                        for o_c in 0..ow {
                            let iw = (o_c * stride + v) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                cs[crow + o_c] = xs[xrow + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<F: Scalar>(
    col: &Array2<F>,
    mut gx: ndarray::ArrayViewMut3<'_, F>,
    k: usize,
    stride: usize,
    pad: usize,
) {
    let (c, h, w) = gx.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let cs = col.as_slice().unwrap();
    let gs = gx.as_slice_mut().expect("col2im output not contiguous");
    for ci in 0..c {
        for u in 0..k {
            for v in 0..k {
                let row = (ci * k + u) * k + v;
                let base = row * oh * ow;
                for o_r in 0..oh {
                    let ih = (o_r * stride + u) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let xrow = (ci * h + ih as usize) * w;
                    let crow = base + o_r * ow;
                    for o_c in 0..ow {
                        let iw = (o_c * stride + v) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            let gi = xrow + iw as usize;
                            gs[gi] = gs[gi] + cs[crow + o_c];
                        }
                    }
                }
            }
        }
    }
}

/// Reference convolution: direct quadruple loop, no im2col, no scaling.
/// Kept for oracle comparisons in tests; not used on the training path.
pub fn conv2d_reference<F: Scalar>(
    x: &Array4<F>,
    w: &Array4<F>,
    b: &Array1<F>,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (n, c, h, wd) = x.dim();
    let (oc, ic, k, _) = w.dim();
    assert_eq!(c, ic);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut y = Array4::zeros((n, oc, oh, ow));
    for i in 0..n {
        for o in 0..oc {
            for r in 0..oh {
                for cl in 0..ow {
                    let mut acc = b[o];
                    for ci in 0..c {
                        for u in 0..k {
                            for v in 0..k {
                                let ih = (r * stride + u) as isize - pad as isize;
                                let iw = (cl * stride + v) as isize - pad as isize;
                                if ih >= 0 && iw >= 0 && ih < h as isize && iw < wd as isize {
                                    acc = acc
                                        + x[[i, ci, ih as usize, iw as usize]] * w[[o, ci, u, v]];
                                }
                            }
                        }
                    }
                    y[[i, o, r, cl]] = acc;
                }
            }
        }
    }
    y
}
