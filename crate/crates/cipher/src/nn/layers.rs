//! Parameter-free layers: activations, pooling, resampling, dropout, and
//! the minibatch standard-deviation channel used by the GAN discriminator.

use ndarray::{Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::param::{Layer, Mode, ParamFn, ParamSet};
use super::scalar::Scalar;

fn sigmoid_f64(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable sigmoid.
pub fn sigmoid<F: Scalar>(v: F) -> F {
    F::from_f64(sigmoid_f64(v.to_f64()))
}

pub struct LeakyReLU<F: Scalar> {
    pub slope: F,
    cache: Option<Array4<F>>, // input
}

impl<F: Scalar> LeakyReLU<F> {
    pub fn new(slope: f64) -> Self {
        LeakyReLU {
            slope: F::from_f64(slope),
            cache: None,
        }
    }
}

impl<F: Scalar> ParamSet<F> for LeakyReLU<F> {
    fn visit_params(&mut self, _prefix: &str, _f: &mut ParamFn<'_, F>) {}
}

impl<F: Scalar> Layer<F> for LeakyReLU<F> {
    fn forward(&mut self, x: Array4<F>, _mode: Mode) -> Array4<F> {
        let slope = self.slope;
        let y = x.mapv(|v| if v > F::zero() { v } else { slope * v });
        self.cache = Some(x);
        y
    }

    fn backward(&mut self, mut gy: Array4<F>) -> Array4<F> {
        let x = self.cache.take().expect("leaky_relu backward");
        let slope = self.slope;
        gy.zip_mut_with(&x, |g, &v| {
            if v <= F::zero() {
                *g = *g * slope;
            }
        });
        gy
    }
}

pub struct SiLU<F: Scalar> {
    cache: Option<Array4<F>>, // input
}

impl<F: Scalar> SiLU<F> {
    pub fn new() -> Self {
        SiLU { cache: None }
    }
}

impl<F: Scalar> Default for SiLU<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> for SiLU<F> {
    fn visit_params(&mut self, _prefix: &str, _f: &mut ParamFn<'_, F>) {}
}

impl<F: Scalar> Layer<F> for SiLU<F> {
    fn forward(&mut self, x: Array4<F>, _mode: Mode) -> Array4<F> {
        let y = x.mapv(|v| v * sigmoid(v));
        self.cache = Some(x);
        y
    }

    fn backward(&mut self, mut gy: Array4<F>) -> Array4<F> {
        let x = self.cache.take().expect("silu backward");
        gy.zip_mut_with(&x, |g, &v| {
            let s = sigmoid(v);
            *g = *g * (s + v * s * (F::one() - s));
        });
        gy
    }
}

pub struct Sigmoid<F: Scalar> {
    cache: Option<Array4<F>>, // output
}

impl<F: Scalar> Sigmoid<F> {
    pub fn new() -> Self {
        Sigmoid { cache: None }
    }
}

impl<F: Scalar> Default for Sigmoid<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> for Sigmoid<F> {
    fn visit_params(&mut self, _prefix: &str, _f: &mut ParamFn<'_, F>) {}
}

impl<F: Scalar> Layer<F> for Sigmoid<F> {
    fn forward(&mut self, x: Array4<F>, _mode: Mode) -> Array4<F> {
        let y = x.mapv(sigmoid);
        self.cache = Some(y.clone());
        y
    }

    fn backward(&mut self, mut gy: Array4<F>) -> Array4<F> {
        let y = self.cache.take().expect("sigmoid backward");
        gy.zip_mut_with(&y, |g, &s| *g = *g * s * (F::one() - s));
        gy
    }
}

pub struct Tanh<F: Scalar> {
    cache: Option<Array4<F>>, // output
}

impl<F: Scalar> Tanh<F> {
    pub fn new() -> Self {
        Tanh { cache: None }
    }
}

impl<F: Scalar> Default for Tanh<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> for Tanh<F> {
    fn visit_params(&mut self, _prefix: &str, _f: &mut ParamFn<'_, F>) {}
}

impl<F: Scalar> Layer<F> for Tanh<F> {
    fn forward(&mut self, x: Array4<F>, _mode: Mode) -> Array4<F> {
        let y = x.mapv(|v| v.tanh());
        self.cache = Some(y.clone());
        y
    }

    fn backward(&mut self, mut gy: Array4<F>) -> Array4<F> {
        let y = self.cache.take().expect("tanh backward");
        gy.zip_mut_with(&y, |g, &t| *g = *g * (F::one() - t * t));
        gy
    }
}

/// 2x2 average pooling with stride 2. Spatial dims must be even.
pub struct AvgPool2<F: Scalar> {
    in_shape: Option<(usize, usize, usize, usize)>,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> AvgPool2<F> {
    pub fn new() -> Self {
        AvgPool2 {
            in_shape: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<F: Scalar> Default for AvgPool2<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> for AvgPool2<F> {
    fn visit_params(&mut self, _prefix: &str, _f: &mut ParamFn<'_, F>) {}
}

impl<F: Scalar> Layer<F> for AvgPool2<F> {
    fn forward(&mut self, x: Array4<F>, _mode: Mode) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avgpool2 needs even spatial dims");
        self.in_shape = Some((n, c, h, w));
        let quarter = F::from_f64(0.25);
        let mut y = Array4::zeros((n, c, h / 2, w / 2));
        for i in 0..n {
            for ci in 0..c {
                for r in 0..h / 2 {
                    for cl in 0..w / 2 {
                        let s = x[[i, ci, 2 * r, 2 * cl]]
                            + x[[i, ci, 2 * r, 2 * cl + 1]]
                            + x[[i, ci, 2 * r + 1, 2 * cl]]
                            + x[[i, ci, 2 * r + 1, 2 * cl + 1]];
                        y[[i, ci, r, cl]] = s * quarter;
                    }
                }
            }
        }
        y
    }

    fn backward(&mut self, gy: Array4<F>) -> Array4<F> {
        let (n, c, h, w) = self.in_shape.take().expect("avgpool2 backward");
        let quarter = F::from_f64(0.25);
        let mut gx = Array4::zeros((n, c, h, w));
        for i in 0..n {
            for ci in 0..c {
                for r in 0..h / 2 {
                    for cl in 0..w / 2 {
                        let g = gy[[i, ci, r, cl]] * quarter;
                        gx[[i, ci, 2 * r, 2 * cl]] = g;
                        gx[[i, ci, 2 * r, 2 * cl + 1]] = g;
                        gx[[i, ci, 2 * r + 1, 2 * cl]] = g;
                        gx[[i, ci, 2 * r + 1, 2 * cl + 1]] = g;
                    }
                }
            }
        }
        gx
    }
}

/// Nearest-neighbour 2x upsampling.
pub struct UpsampleNearest2<F: Scalar> {
    in_shape: Option<(usize, usize, usize, usize)>,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> UpsampleNearest2<F> {
    pub fn new() -> Self {
        UpsampleNearest2 {
            in_shape: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<F: Scalar> Default for UpsampleNearest2<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> for UpsampleNearest2<F> {
    fn visit_params(&mut self, _prefix: &str, _f: &mut ParamFn<'_, F>) {}
}

impl<F: Scalar> Layer<F> for UpsampleNearest2<F> {
    fn forward(&mut self, x: Array4<F>, _mode: Mode) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        self.in_shape = Some((n, c, h, w));
        let mut y = Array4::zeros((n, c, 2 * h, 2 * w));
        for i in 0..n {
            for ci in 0..c {
                for r in 0..h {
                    for cl in 0..w {
                        let v = x[[i, ci, r, cl]];
                        y[[i, ci, 2 * r, 2 * cl]] = v;
                        y[[i, ci, 2 * r, 2 * cl + 1]] = v;
                        y[[i, ci, 2 * r + 1, 2 * cl]] = v;
                        y[[i, ci, 2 * r + 1, 2 * cl + 1]] = v;
                    }
                }
            }
        }
        y
    }

    fn backward(&mut self, gy: Array4<F>) -> Array4<F> {
        let (n, c, h, w) = self.in_shape.take().expect("upsample backward");
        let mut gx = Array4::zeros((n, c, h, w));
        for i in 0..n {
            for ci in 0..c {
                for r in 0..h {
                    for cl in 0..w {
                        gx[[i, ci, r, cl]] = gy[[i, ci, 2 * r, 2 * cl]]
                            + gy[[i, ci, 2 * r, 2 * cl + 1]]
                            + gy[[i, ci, 2 * r + 1, 2 * cl]]
                            + gy[[i, ci, 2 * r + 1, 2 * cl + 1]];
                    }
                }
            }
        }
        gx
    }
}

/// Inverted dropout. Identity in eval mode; in train mode zeroes units with
/// probability `p` and rescales survivors by `1/(1-p)`.
pub struct Dropout<F: Scalar> {
    pub p: f64,
    rng: ChaCha12Rng,
    mask: Option<Array4<F>>,
}

impl<F: Scalar> Dropout<F> {
    pub fn new(p: f64, seed: u64) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout p must be in [0,1)");
        Dropout {
            p,
            rng: ChaCha12Rng::seed_from_u64(seed),
            mask: None,
        }
    }
}

impl<F: Scalar> ParamSet<F> for Dropout<F> {
    fn visit_params(&mut self, _prefix: &str, _f: &mut ParamFn<'_, F>) {}
}

impl<F: Scalar> Layer<F> for Dropout<F> {
    fn forward(&mut self, x: Array4<F>, mode: Mode) -> Array4<F> {
        if mode == Mode::Eval || self.p == 0.0 {
            self.mask = None;
            return x;
        }
        let keep = F::from_f64(1.0 / (1.0 - self.p));
        let mask = Array4::from_shape_simple_fn(x.dim(), || {
            if super::rng::uniform::<f64>(&mut self.rng, 0.0, 1.0) < self.p {
                F::zero()
            } else {
                keep
            }
        });
        let y = &x * &mask;
        self.mask = Some(mask);
        y
    }

    fn backward(&mut self, gy: Array4<F>) -> Array4<F> {
        match self.mask.take() {
            Some(mask) => &gy * &mask,
            None => gy,
        }
    }
}

/// Appends one channel holding the scalar mean of per-feature population
/// standard deviations across the batch, computed over all (c, h, w).
///
/// In eval mode a recorded reference value can be substituted so single
/// images score independently of batch composition.
pub struct MinibatchStd<F: Scalar> {
    /// Reference statistic for eval mode; `None` falls back to the live batch
    /// statistic (which is 0 for a batch of one).
    pub ref_std: Option<F>,
    cache: Option<MbStdCache<F>>,
}

struct MbStdCache<F> {
    x: Array4<F>,
    mean: ndarray::Array3<F>,
    std: ndarray::Array3<F>,
}

impl<F: Scalar> MinibatchStd<F> {
    pub fn new() -> Self {
        MinibatchStd {
            ref_std: None,
            cache: None,
        }
    }

    /// Per-feature mean and population standard deviation across the batch.
    /// A feature that is constant across the batch gets std exactly 0 (the
    /// naive sum can leave rounding residue); a batch of identical samples
    /// therefore yields a statistic of exactly 0.
    fn feature_stats(x: &Array4<F>) -> (ndarray::Array3<F>, ndarray::Array3<F>) {
        let (n, c, h, w) = x.dim();
        let nf = F::from_f64(n as f64);
        let mut mean = ndarray::Array3::<F>::zeros((c, h, w));
        let mut std = ndarray::Array3::<F>::zeros((c, h, w));
        for ci in 0..c {
            for r in 0..h {
                for cl in 0..w {
                    let first = x[[0, ci, r, cl]];
                    let mut sum = F::zero();
                    let mut constant = true;
                    for i in 0..n {
                        let v = x[[i, ci, r, cl]];
                        sum = sum + v;
                        constant &= v == first;
                    }
                    if constant {
                        mean[[ci, r, cl]] = first;
                        continue; // std stays exactly 0
                    }
                    let m = sum / nf;
                    let mut var = F::zero();
                    for i in 0..n {
                        let d = x[[i, ci, r, cl]] - m;
                        var = var + d * d;
                    }
                    mean[[ci, r, cl]] = m;
                    std[[ci, r, cl]] = (var / nf).sqrt();
                }
            }
        }
        (mean, std)
    }

    fn mean_of(std: &ndarray::Array3<F>) -> F {
        let mut acc = F::zero();
        for &v in std.iter() {
            acc = acc + v;
        }
        acc / F::from_f64(std.len() as f64)
    }

    /// The scalar statistic alone: mean over features of the per-feature
    /// population standard deviation across the batch.
    pub fn statistic(x: &Array4<F>) -> F {
        let (_, std) = Self::feature_stats(x);
        Self::mean_of(&std)
    }
}

impl<F: Scalar> Default for MinibatchStd<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> for MinibatchStd<F> {
    fn visit_params(&mut self, _prefix: &str, _f: &mut ParamFn<'_, F>) {}
}

impl<F: Scalar> Layer<F> for MinibatchStd<F> {
    fn forward(&mut self, x: Array4<F>, mode: Mode) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        let s = match (mode, self.ref_std) {
            (Mode::Eval, Some(r)) => {
                self.cache = None;
                r
            }
            _ => {
                let (mean, std) = Self::feature_stats(&x);
                let s = Self::mean_of(&std);
                if mode == Mode::Train {
                    self.cache = Some(MbStdCache {
                        x: x.clone(),
                        mean,
                        std,
                    });
                } else {
                    self.cache = None;
                }
                s
            }
        };
        let mut y = Array4::zeros((n, c + 1, h, w));
        y.slice_mut(ndarray::s![.., ..c, .., ..]).assign(&x);
        y.slice_mut(ndarray::s![.., c.., .., ..]).fill(s);
        y
    }

    fn backward(&mut self, gy: Array4<F>) -> Array4<F> {
        let cache = self.cache.take().expect("minibatch_std backward");
        let (n, c1, h, w) = gy.dim();
        let c = c1 - 1;
        let gs = gy.slice(ndarray::s![.., c.., .., ..]).sum();
        let mut gx = gy.slice(ndarray::s![.., ..c, .., ..]).to_owned();
        // dS/dx[i,f] = (x[i,f] - mean[f]) / (n * std[f] * CHW); 0 where std = 0.
        let denom = F::from_f64((n * c * h * w) as f64);
        for i in 0..n {
            let xi = cache.x.index_axis(Axis(0), i);
            let mut gi = gx.index_axis_mut(Axis(0), i);
            ndarray::Zip::from(&mut gi)
                .and(&xi)
                .and(&cache.mean)
                .and(&cache.std)
                .for_each(|g, &xv, &m, &s| {
                    if s > F::zero() {
                        *g = *g + gs * (xv - m) / (s * denom);
                    }
                });
        }
        gx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng::{randn4, seeded_rng};

    #[test]
    fn minibatch_std_statistic_known_values() {
        // Duplicated batch -> zero variance -> statistic exactly 0.
        let mut x = Array4::<f64>::zeros((4, 2, 3, 3));
        for i in 0..4 {
            for ci in 0..2 {
                for r in 0..3 {
                    for cl in 0..3 {
                        x[[i, ci, r, cl]] = (ci * 9 + r * 3 + cl) as f64 * 0.1 - 0.7;
                    }
                }
            }
        }
        assert_eq!(MinibatchStd::statistic(&x), 0.0);

        // Batch {0, 2} everywhere: population std = 1 for every feature.
        let mut z = Array4::<f64>::zeros((2, 3, 2, 2));
        z.index_axis_mut(Axis(0), 1).fill(2.0);
        assert_eq!(MinibatchStd::statistic(&z), 1.0);
    }

    #[test]
    fn minibatch_std_appends_channel() {
        let mut layer = MinibatchStd::<f64>::new();
        let mut rng = seeded_rng(5, "mbstd");
        let x = randn4::<f64>(&mut rng, (3, 2, 4, 4));
        let y = layer.forward(x.clone(), Mode::Train);
        assert_eq!(y.dim(), (3, 3, 4, 4));
        let s = MinibatchStd::statistic(&x);
        assert!(y
            .slice(ndarray::s![.., 2.., .., ..])
            .iter()
            .all(|&v| v == s));
        assert_eq!(y.slice(ndarray::s![.., ..2, .., ..]), x);
    }

    #[test]
    fn minibatch_std_eval_uses_reference() {
        let mut layer = MinibatchStd::<f64>::new();
        layer.ref_std = Some(0.42);
        let x = Array4::<f64>::zeros((1, 2, 2, 2));
        let y = layer.forward(x, Mode::Eval);
        assert!(y.slice(ndarray::s![.., 2.., .., ..]).iter().all(|&v| v == 0.42));
    }

    #[test]
    fn minibatch_std_gradient_matches_fd() {
        let mut layer = MinibatchStd::<f64>::new();
        let mut rng = seeded_rng(6, "mbstd-grad");
        let x = randn4::<f64>(&mut rng, (3, 2, 2, 2));
        let gy = randn4::<f64>(&mut rng, (3, 3, 2, 2));
        let _ = layer.forward(x.clone(), Mode::Train);
        let gx = layer.backward(gy.clone());

        let loss = |layer: &mut MinibatchStd<f64>, x: &Array4<f64>| {
            (&layer.forward(x.clone(), Mode::Train) * &gy).sum()
        };
        let h = 1e-6;
        let mut xp = x.clone();
        for idx in [[0, 0, 0, 0], [1, 1, 1, 1], [2, 0, 1, 0]] {
            let orig = xp[idx];
            xp[idx] = orig + h;
            let lp = loss(&mut layer, &xp);
            xp[idx] = orig - h;
            let lm = loss(&mut layer, &xp);
            xp[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (gx[idx] - fd).abs() < 1e-5 * fd.abs().max(1.0),
                "idx {idx:?}: {} vs {}",
                gx[idx],
                fd
            );
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint_shapes() {
        let mut rng = seeded_rng(8, "pool");
        let x = randn4::<f64>(&mut rng, (2, 3, 6, 6));
        let mut pool = AvgPool2::new();
        let y = pool.forward(x.clone(), Mode::Train);
        assert_eq!(y.dim(), (2, 3, 3, 3));
        assert!((y[[0, 0, 0, 0]]
            - 0.25 * (x[[0, 0, 0, 0]] + x[[0, 0, 0, 1]] + x[[0, 0, 1, 0]] + x[[0, 0, 1, 1]]))
            .abs()
            < 1e-15);
        let gx = pool.backward(Array4::ones((2, 3, 3, 3)));
        assert!(gx.iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let mut up = UpsampleNearest2::new();
        let u = up.forward(y.clone(), Mode::Train);
        assert_eq!(u.dim(), (2, 3, 6, 6));
        assert_eq!(u[[1, 2, 5, 5]], y[[1, 2, 2, 2]]);
        let gu = up.backward(Array4::ones((2, 3, 6, 6)));
        assert!(gu.iter().all(|&v| (v - 4.0).abs() < 1e-15));
    }

    #[test]
    fn dropout_eval_is_identity_and_train_rescales() {
        let mut d = Dropout::<f64>::new(0.5, 123);
        let x = Array4::ones((4, 2, 4, 4));
        let y = d.forward(x.clone(), Mode::Eval);
        assert_eq!(y, x);
        let y = d.forward(x.clone(), Mode::Train);
        assert!(y.iter().all(|&v| v == 0.0 || (v - 2.0).abs() < 1e-15));
        let dropped = y.iter().filter(|&&v| v == 0.0).count();
        assert!(dropped > 0 && dropped < y.len());
        let g = d.backward(Array4::ones(y.dim()));
        // gradient mask matches forward mask
        for (gv, yv) in g.iter().zip(y.iter()) {
            assert_eq!(*gv == 0.0, *yv == 0.0);
        }
    }

    #[test]
    fn activation_gradients_match_fd() {
        let mut rng = seeded_rng(9, "act");
        let x = randn4::<f64>(&mut rng, (2, 2, 3, 3));
        let gy = randn4::<f64>(&mut rng, (2, 2, 3, 3));
        let h = 1e-6;

        macro_rules! check {
            ($layer:expr) => {{
                let mut layer = $layer;
                let _ = layer.forward(x.clone(), Mode::Train);
                let gx = layer.backward(gy.clone());
                for idx in [[0, 0, 0, 0], [1, 1, 2, 2], [0, 1, 1, 2]] {
                    let mut xp = x.clone();
                    xp[idx] += h;
                    let lp = (&layer.forward(xp.clone(), Mode::Train) * &gy).sum();
                    xp[idx] -= 2.0 * h;
                    let lm = (&layer.forward(xp, Mode::Train) * &gy).sum();
                    let fd = (lp - lm) / (2.0 * h);
                    assert!((gx[idx] - fd).abs() < 1e-5 * fd.abs().max(1.0));
                }
            }};
        }
        check!(LeakyReLU::<f64>::new(0.2));
        check!(SiLU::<f64>::new());
        check!(Sigmoid::<f64>::new());
        check!(Tanh::<f64>::new());
    }
}
