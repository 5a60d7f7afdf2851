//! Fully connected layer operating on (batch, features) matrices.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2};
use rand_chacha::ChaCha12Rng;

use super::param::{param_entry, ParamFn, ParamSet};
use super::rng::normal;
use super::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearInit {
    /// Store N(0,1), apply `sqrt(2/fan_in)` at forward time.
    WeightScaled,
    /// Store N(0, 1/sqrt(fan_in)), runtime scale 1 (default for the U-Net MLP).
    LeCun,
    /// Zero weights.
    Zero,
}

pub struct Linear<F: Scalar> {
    pub w: Array2<F>, // (out, in)
    pub b: Array1<F>,
    pub gw: Array2<F>,
    pub gb: Array1<F>,
    pub runtime_scale: F,
    cache: Option<Array2<F>>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(in_f: usize, out_f: usize, init: LinearInit, rng: &mut ChaCha12Rng) -> Self {
        let w = match init {
            LinearInit::WeightScaled => {
                Array2::from_shape_fn((out_f, in_f), |_| normal::<F>(rng))
            }
            LinearInit::LeCun => {
                let std = F::from_f64(1.0 / (in_f as f64).sqrt());
                Array2::from_shape_fn((out_f, in_f), |_| std * normal::<F>(rng))
            }
            LinearInit::Zero => Array2::zeros((out_f, in_f)),
        };
        let runtime_scale = if init == LinearInit::WeightScaled {
            F::from_f64((2.0 / in_f as f64).sqrt())
        } else {
            F::one()
        };
        Linear {
            w,
            b: Array1::zeros(out_f),
            gw: Array2::zeros((out_f, in_f)),
            gb: Array1::zeros(out_f),
            runtime_scale,
            cache: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.w.dim().1
    }

    pub fn out_features(&self) -> usize {
        self.w.dim().0
    }

    pub fn forward(&mut self, x: &Array2<F>) -> Array2<F> {
        let (n, d) = x.dim();
        assert_eq!(d, self.in_features(), "linear input features");
        let (out_f, _) = self.w.dim();
        let mut y = Array2::zeros((n, out_f));
        let mut weff = self.w.clone();
        if self.runtime_scale != F::one() {
            weff.mapv_inplace(|v| v * self.runtime_scale);
        }
        general_mat_mul(F::one(), x, &weff.t(), F::zero(), &mut y);
        for mut row in y.rows_mut() {
            row.zip_mut_with(&self.b, |v, b| *v = *v + *b);
        }
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, gy: &Array2<F>) -> Array2<F> {
        let x = self.cache.take().expect("linear backward without forward");
        let (n, _) = x.dim();
        assert_eq!(gy.dim().0, n, "linear grad batch");
        let scale = self.runtime_scale;

        // gw += scale * gy^T x ; gb += column sums of gy
        let mut gw = Array2::zeros(self.w.dim());
        general_mat_mul(scale, &gy.t(), &x, F::zero(), &mut gw);
        self.gw.zip_mut_with(&gw, |a, b| *a = *a + *b);
        for (j, col) in gy.columns().into_iter().enumerate() {
            self.gb[j] = self.gb[j] + col.sum();
        }

        let mut weff = self.w.clone();
        if scale != F::one() {
            weff.mapv_inplace(|v| v * scale);
        }
        let mut gx = Array2::zeros(x.dim());
        general_mat_mul(F::one(), gy, &weff, F::zero(), &mut gx);
        gx
    }
}

impl<F: Scalar> ParamSet<F> for Linear<F> {
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
