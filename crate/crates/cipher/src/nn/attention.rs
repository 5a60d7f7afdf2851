//! Single-head self-attention over spatial positions, with a residual
//! connection. Used at selected U-Net resolutions.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, Axis};
use rand_chacha::ChaCha12Rng;

use super::conv::{Conv2d, ConvInit};
use super::norm::GroupNorm;
use super::param::{Layer, Mode, ParamFn, ParamSet};
use super::scalar::Scalar;

pub struct SelfAttention2d<F: Scalar> {
    pub norm: GroupNorm<F>,
    pub qkv: Conv2d<F>,
    pub proj: Conv2d<F>,
    scale: F,
    cache: Option<AttnCache<F>>,
}

struct AttnCache<F> {
    q: Vec<Array2<F>>, // per sample, (c, hw)
    k: Vec<Array2<F>>,
    v: Vec<Array2<F>>,
    a: Vec<Array2<F>>, // attention weights, (hw, hw), rows sum to 1
    shape: (usize, usize, usize, usize),
}

impl<F: Scalar> SelfAttention2d<F> {
    pub fn new(channels: usize, rng: &mut ChaCha12Rng) -> Self {
        SelfAttention2d {
            norm: GroupNorm::new(channels),
            qkv: Conv2d::new(channels, 3 * channels, 1, 1, 0, ConvInit::HeNormal, rng),
            proj: Conv2d::new(channels, channels, 1, 1, 0, ConvInit::Zero, rng),
            scale: F::from_f64(1.0 / (channels as f64).sqrt()),
            cache: None,
        }
    }
}

fn softmax_rows<F: Scalar>(s: &mut Array2<F>) {
    for mut row in s.rows_mut() {
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

impl<F: Scalar> ParamSet<F> for SelfAttention2d<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        self.norm
            .visit_params(&super::param::join(prefix, "norm"), f);
        self.qkv.visit_params(&super::param::join(prefix, "qkv"), f);
        self.proj
            .visit_params(&super::param::join(prefix, "proj"), f);
    }
}

impl<F: Scalar> Layer<F> for SelfAttention2d<F> {
    fn forward(&mut self, x: Array4<F>, mode: Mode) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        let hw = h * w;
        let hn = self.norm.forward(x.clone(), mode);
        let qkv = self.qkv.forward(hn, mode);

        let mut qs = Vec::with_capacity(n);
        let mut ks = Vec::with_capacity(n);
        let mut vs = Vec::with_capacity(n);
        let mut attn = Vec::with_capacity(n);
        let mut out = Array4::zeros((n, c, h, w));
        for i in 0..n {
            let qkv_i = qkv.index_axis(Axis(0), i);
            let flat =
                Array2::from_shape_vec((3 * c, hw), qkv_i.iter().cloned().collect()).unwrap();
            let q = flat.slice(ndarray::s![..c, ..]).to_owned();
            let k = flat.slice(ndarray::s![c..2 * c, ..]).to_owned();
            let v = flat.slice(ndarray::s![2 * c.., ..]).to_owned();

            // scores[i,j] = scale * <q_:,i , k_:,j>
            let mut s = Array2::zeros((hw, hw));
            general_mat_mul(self.scale, &q.t(), &k, F::zero(), &mut s);
            softmax_rows(&mut s);

            // out[c,i] = sum_j a[i,j] v[c,j]
            let mut o = Array2::zeros((c, hw));
            general_mat_mul(F::one(), &v, &s.t(), F::zero(), &mut o);
            out.index_axis_mut(Axis(0), i)
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(o.as_slice().unwrap());

            qs.push(q);
            ks.push(k);
            vs.push(v);
            attn.push(s);
        }
        let y = self.proj.forward(out, mode);
        self.cache = Some(AttnCache {
            q: qs,
            k: ks,
            v: vs,
            a: attn,
            shape: (n, c, h, w),
        });
        &y + &x
    }

    fn backward(&mut self, gy: Array4<F>) -> Array4<F> {
        let cache = self.cache.take().expect("attention backward");
        let (n, c, h, w) = cache.shape;
        let hw = h * w;
        let go = self.proj.backward(gy.clone());

        let mut gqkv = Array4::zeros((n, 3 * c, h, w));
        for i in 0..n {
            let goi = go.index_axis(Axis(0), i);
            let gom =
                Array2::from_shape_vec((c, hw), goi.iter().cloned().collect()).unwrap();
            let a = &cache.a[i];
            let (q, k, v) = (&cache.q[i], &cache.k[i], &cache.v[i]);

            // gV = gO A
            let mut gv = Array2::zeros((c, hw));
            general_mat_mul(F::one(), &gom, a, F::zero(), &mut gv);
            // gA = gO^T V
            let mut ga = Array2::zeros((hw, hw));
            general_mat_mul(F::one(), &gom.t(), v, F::zero(), &mut ga);
            // softmax backward, row-wise
            let mut gs = Array2::zeros((hw, hw));
            for r in 0..hw {
                let arow = a.row(r);
                let garow = ga.row(r);
                let dot = arow
                    .iter()
                    .zip(garow.iter())
                    .fold(F::zero(), |acc, (&av, &gv)| acc + av * gv);
                let mut gsrow = gs.row_mut(r);
                for j in 0..hw {
                    gsrow[j] = arow[j] * (garow[j] - dot);
                }
            }
            // gQ = scale * K gS^T ; gK = scale * Q gS
            let mut gq = Array2::zeros((c, hw));
            general_mat_mul(self.scale, k, &gs.t(), F::zero(), &mut gq);
            let mut gk = Array2::zeros((c, hw));
            general_mat_mul(self.scale, q, &gs, F::zero(), &mut gk);

            let mut dst = gqkv.index_axis_mut(Axis(0), i);
            let ds = dst.as_slice_mut().unwrap();
            ds[..c * hw].copy_from_slice(gq.as_slice().unwrap());
            ds[c * hw..2 * c * hw].copy_from_slice(gk.as_slice().unwrap());
            ds[2 * c * hw..].copy_from_slice(gv.as_slice().unwrap());
        }
        let gh = self.qkv.backward(gqkv);
        let gx_norm = self.norm.backward(gh);
        &gx_norm + &gy
    }
}
