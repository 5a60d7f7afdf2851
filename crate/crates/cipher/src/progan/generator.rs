//! Progressive generator: the mirror of the discriminator. A latent vector
//! is normalized, projected to a 4x4 feature map, and refined by one
//! upsampling block per stage. Every stage has its own 1x1 `toRGB`
//! projection; a tanh squashes the image into [-1, 1].
//!
//! While a stage fades in, the previous stage's RGB output is upsampled 2x
//! and blended with the new stage's RGB via [`fade_in`], so early in the
//! fade the new layers barely perturb the image.

use ndarray::{Array1, Array2, Array4};
use rand_chacha::ChaCha12Rng;

use crate::error::{CipherError, Result};
use crate::nn::conv::{Conv2d, ConvInit};
use crate::nn::layers::{LeakyReLU, Tanh, UpsampleNearest2};
use crate::nn::linear::{Linear, LinearInit};
use crate::nn::norm::PixelNorm;
use crate::nn::param::{join, Layer, Mode, ParamFn, ParamSet};
use crate::nn::Scalar;

use super::{fade_in, stage_widths, ProgressiveStage, BASE_RESOLUTION};

const LRELU_SLOPE: f64 = 0.2;

/// Latent to 4x4: pixel-normalize z, project with a weight-scaled linear
/// layer, reshape, then one 3x3 convolution. Pixel normalization follows
/// each activation.
struct GenBase<F: Scalar> {
    width: usize,
    pn_z: PixelNorm<F>,
    fc: Linear<F>,
    act0: LeakyReLU<F>,
    pn0: PixelNorm<F>,
    conv: Conv2d<F>,
    act1: LeakyReLU<F>,
    pn1: PixelNorm<F>,
}

impl<F: Scalar> GenBase<F> {
    fn new(latent_dim: usize, width: usize, rng: &mut ChaCha12Rng) -> Self {
        let spatial = BASE_RESOLUTION * BASE_RESOLUTION;
        GenBase {
            width,
            pn_z: PixelNorm::new(),
            fc: Linear::new(latent_dim, width * spatial, LinearInit::WeightScaled, rng),
            act0: LeakyReLU::new(LRELU_SLOPE),
            pn0: PixelNorm::new(),
            conv: Conv2d::new(width, width, 3, 1, 1, ConvInit::WeightScaled, rng),
            act1: LeakyReLU::new(LRELU_SLOPE),
            pn1: PixelNorm::new(),
        }
    }

    fn forward(&mut self, z: &Array2<F>, mode: Mode) -> Array4<F> {
        let (n, d) = z.dim();
        let z4 = z
            .clone()
            .into_shape_with_order((n, d, 1, 1))
            .expect("latent reshape");
        let z4 = self.pn_z.forward(z4, mode);
        let z2 = z4.into_shape_with_order((n, d)).expect("latent reshape");
        let h = self.fc.forward(&z2);
        let h = h
            .into_shape_with_order((n, self.width, BASE_RESOLUTION, BASE_RESOLUTION))
            .expect("base reshape");
        let h = self.pn0.forward(self.act0.forward(h, mode), mode);
        self.pn1
            .forward(self.act1.forward(self.conv.forward(h, mode), mode), mode)
    }

    fn backward(&mut self, gy: Array4<F>) -> Array2<F> {
        let g = self.conv.backward(self.act1.backward(self.pn1.backward(gy)));
        let g = self.act0.backward(self.pn0.backward(g));
        let (n, _, _, _) = g.dim();
        let flat = g
            .into_shape_with_order((n, self.width * BASE_RESOLUTION * BASE_RESOLUTION))
            .expect("base reshape");
        let gz = self.fc.backward(&flat);
        let d = gz.dim().1;
        let gz4 = gz
            .into_shape_with_order((n, d, 1, 1))
            .expect("latent reshape");
        let gz4 = self.pn_z.backward(gz4);
        gz4.into_shape_with_order((n, d)).expect("latent reshape")
    }
}

impl<F: Scalar> ParamSet<F> for GenBase<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        self.fc.visit_params(&join(prefix, "fc"), f);
        self.conv.visit_params(&join(prefix, "conv"), f);
    }
}

/// One resolution-doubling block: nearest-neighbor upsample then two 3x3
/// weight-scaled convolutions (the first widens from the previous stage).
struct UpBlock<F: Scalar> {
    up: UpsampleNearest2<F>,
    conv1: Conv2d<F>,
    act1: LeakyReLU<F>,
    pn1: PixelNorm<F>,
    conv2: Conv2d<F>,
    act2: LeakyReLU<F>,
    pn2: PixelNorm<F>,
}

impl<F: Scalar> UpBlock<F> {
    fn new(prev_width: usize, width: usize, rng: &mut ChaCha12Rng) -> Self {
        UpBlock {
            up: UpsampleNearest2::new(),
            conv1: Conv2d::new(prev_width, width, 3, 1, 1, ConvInit::WeightScaled, rng),
            act1: LeakyReLU::new(LRELU_SLOPE),
            pn1: PixelNorm::new(),
            conv2: Conv2d::new(width, width, 3, 1, 1, ConvInit::WeightScaled, rng),
            act2: LeakyReLU::new(LRELU_SLOPE),
            pn2: PixelNorm::new(),
        }
    }

    fn forward(&mut self, x: Array4<F>, mode: Mode) -> Array4<F> {
        let h = self.up.forward(x, mode);
        let h = self
            .pn1
            .forward(self.act1.forward(self.conv1.forward(h, mode), mode), mode);
        self.pn2
            .forward(self.act2.forward(self.conv2.forward(h, mode), mode), mode)
    }

    fn backward(&mut self, gy: Array4<F>) -> Array4<F> {
        let g = self
            .conv2
            .backward(self.act2.backward(self.pn2.backward(gy)));
        let g = self
            .conv1
            .backward(self.act1.backward(self.pn1.backward(g)));
        self.up.backward(g)
    }
}

impl<F: Scalar> ParamSet<F> for UpBlock<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
    }
}

struct Route {
    stage: usize,
    fade_alpha: f64,
}

pub struct Generator<F: Scalar> {
    pub stages: usize,
    pub widths: Vec<usize>,
    pub latent_dim: usize,
    base: GenBase<F>,
    /// `blocks[i]` upsamples stage `i` features to stage `i + 1`.
    blocks: Vec<UpBlock<F>>,
    to_rgb: Vec<Conv2d<F>>,
    rgb_up: UpsampleNearest2<F>,
    tanh: Tanh<F>,
    route: Option<Route>,
}

impl<F: Scalar> Generator<F> {
    pub fn new(
        channels: usize,
        stages: usize,
        latent_dim: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        if stages == 0 {
            return Err(CipherError::Config(
                "generator needs at least one stage".into(),
            ));
        }
        if channels == 0 || latent_dim == 0 {
            return Err(CipherError::Config(
                "generator channel width and latent dim must be positive".into(),
            ));
        }
        let widths = stage_widths(channels, stages);
        let base = GenBase::new(latent_dim, widths[0], rng);
        let blocks = (1..stages)
            .map(|k| UpBlock::new(widths[k - 1], widths[k], rng))
            .collect::<Vec<_>>();
        let to_rgb = widths
            .iter()
            .map(|&w| Conv2d::new(w, 3, 1, 1, 0, ConvInit::WeightScaled, rng))
            .collect::<Vec<_>>();
        Ok(Generator {
            stages,
            widths,
            latent_dim,
            base,
            blocks,
            to_rgb,
            rgb_up: UpsampleNearest2::new(),
            tanh: Tanh::new(),
            route: None,
        })
    }

    /// Canonical architecture description hashed into checkpoints.
    pub fn arch(&self) -> String {
        let widths = self
            .widths
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "progan-gen:v1:stages={}:widths={widths}:latent={}",
            self.stages, self.latent_dim
        )
    }

    /// Generate a batch of RGB images at the stage's resolution, valued in
    /// [-1, 1].
    pub fn forward(
        &mut self,
        z: &Array2<F>,
        stage: ProgressiveStage,
        mode: Mode,
    ) -> Result<Array4<F>> {
        let (n, d) = z.dim();
        if n == 0 || d != self.latent_dim {
            return Err(CipherError::shape(
                "generator latent",
                format!("(N>0, {})", self.latent_dim),
                format!("({n}, {d})"),
            ));
        }
        if stage.index >= self.stages {
            return Err(CipherError::Domain(format!(
                "stage {} out of range for a {}-stage generator",
                stage.index, self.stages
            )));
        }
        ProgressiveStage::new(stage.index, stage.fade_alpha)?;

        let k = stage.index;
        let fading = stage.is_fading();
        let mut h = self.base.forward(z, mode);
        let rgb = if k == 0 {
            self.to_rgb[0].forward(h, mode)
        } else {
            for j in 1..k {
                h = self.blocks[j - 1].forward(h, mode);
            }
            let rgb_old_up = if fading {
                let rgb_old = self.to_rgb[k - 1].forward(h.clone(), mode);
                Some(self.rgb_up.forward(rgb_old, mode))
            } else {
                None
            };
            h = self.blocks[k - 1].forward(h, mode);
            let rgb_new = self.to_rgb[k].forward(h, mode);
            match rgb_old_up {
                Some(old) => fade_in(&old, &rgb_new, stage.fade_alpha)?,
                None => rgb_new,
            }
        };
        self.route = Some(Route {
            stage: k,
            fade_alpha: stage.fade_alpha,
        });
        Ok(self.tanh.forward(rgb, mode))
    }

    /// Backpropagate image-space gradients through the route taken by the
    /// last forward pass. Accumulates parameter gradients and returns the
    /// gradient w.r.t. the latents.
    pub fn backward(&mut self, gy: Array4<F>) -> Array2<F> {
        let route = self.route.take().expect("generator backward without forward");
        let k = route.stage;
        let g_rgb = self.tanh.backward(gy);
        let mut gh = if k == 0 {
            self.to_rgb[0].backward(g_rgb)
        } else if route.fade_alpha < 1.0 {
            let a = F::from_f64(route.fade_alpha);
            let g_new = g_rgb.mapv(|v| v * a);
            let g_old = g_rgb.mapv(|v| v * (F::one() - a));
            let mut gh = self.blocks[k - 1].backward(self.to_rgb[k].backward(g_new));
            let gh_old = self.to_rgb[k - 1].backward(self.rgb_up.backward(g_old));
            gh.zip_mut_with(&gh_old, |x, &y| *x = *x + y);
            gh
        } else {
            self.blocks[k - 1].backward(self.to_rgb[k].backward(g_rgb))
        };
        if k > 0 {
            for j in (1..k).rev() {
                gh = self.blocks[j - 1].backward(gh);
            }
        }
        self.base.backward(gh)
    }

    /// Draw latents from the standard normal.
    pub fn sample_latents(&self, n: usize, rng: &mut ChaCha12Rng) -> Array2<F> {
        crate::nn::rng::randn2(rng, (n, self.latent_dim))
    }

    /// Per-image mean absolute pixel value; handy for smoke checks.
    pub fn image_energy(x: &Array4<F>) -> Array1<F> {
        let (n, c, h, w) = x.dim();
        let denom = F::from_f64((c * h * w) as f64);
        Array1::from_shape_fn(n, |i| {
            let mut s = F::zero();
            for v in x.index_axis(ndarray::Axis(0), i).iter() {
                s = s + v.abs();
            }
            s / denom
        })
    }
}

impl<F: Scalar> ParamSet<F> for Generator<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        self.base.visit_params(&join(prefix, "base"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("block{}", i + 1)), f);
        }
        for (k, c) in self.to_rgb.iter_mut().enumerate() {
            c.visit_params(&join(prefix, &format!("to_rgb{k}")), f);
        }
    }
}
