//! Noise-prediction U-Net. The encoder halves resolution once per level
//! while widening channels by the configured multipliers; the decoder
//! mirrors it with nearest-neighbor upsampling and concatenated skip
//! connections at matching resolutions. Every residual block is conditioned
//! on the timestep through a shared sinusoidal embedding and a two-layer
//! MLP; single-head self-attention is inserted at the configured pixel
//! resolutions.

use ndarray::{Array1, Array2, Array4, Axis};
use rand_chacha::ChaCha12Rng;

use crate::error::{CipherError, Result};
use crate::nn::attention::SelfAttention2d;
use crate::nn::conv::{Conv2d, ConvInit};
use crate::nn::layers::{AvgPool2, SiLU, UpsampleNearest2};
use crate::nn::linear::{Linear, LinearInit};
use crate::nn::norm::GroupNorm;
use crate::nn::param::{join, Layer, Mode, ParamFn, ParamSet};
use crate::nn::Scalar;

/// Interleaved sinusoidal timestep embedding: `emb[2i] = sin(t * w_i)`,
/// `emb[2i+1] = cos(t * w_i)` with geometrically spaced frequencies from 1
/// down to 1/10000. `dim` must be even.
pub fn timestep_embedding<F: Scalar>(t: &[usize], dim: usize) -> Result<Array2<F>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(CipherError::Config(format!(
            "timestep embedding dim must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut emb = Array2::zeros((t.len(), dim));
    for (row, &ti) in t.iter().enumerate() {
        for i in 0..half {
            let freq = if half == 1 {
                1.0
            } else {
                (-(10_000.0f64).ln() * i as f64 / (half - 1) as f64).exp()
            };
            let phase = ti as f64 * freq;
            emb[[row, 2 * i]] = F::from_f64(phase.sin());
            emb[[row, 2 * i + 1]] = F::from_f64(phase.cos());
        }
    }
    Ok(emb)
}

/// Static shape of a U-Net; hashed into checkpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNetSpec {
    /// Resolution the network is built for; attention placement is resolved
    /// against it at construction time.
    pub input_res: usize,
    pub base_channels: usize,
    pub multipliers: Vec<usize>,
    /// Pixel resolutions (e.g. 32 for 32x32) whose levels get self-attention.
    pub attention_resolutions: Vec<usize>,
}

impl Default for UNetSpec {
    fn default() -> Self {
        UNetSpec {
            input_res: 64,
            base_channels: 64,
            multipliers: vec![1, 2, 4],
            attention_resolutions: vec![32],
        }
    }
}

impl UNetSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(CipherError::Config(msg));
        if self.base_channels == 0 || self.base_channels % 2 != 0 {
            return err(format!(
                "base_channels must be even and positive, got {}",
                self.base_channels
            ));
        }
        if self.multipliers.is_empty() || self.multipliers.iter().any(|&m| m == 0) {
            return err("multipliers must be a nonempty list of positive integers".into());
        }
        let depth = self.multipliers.len();
        let div = 1usize << (depth - 1);
        if self.input_res == 0 || self.input_res % div != 0 {
            return err(format!(
                "input resolution {} is not divisible by 2^(depth-1) = {div}",
                self.input_res
            ));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.multipliers.len()
    }

    /// Channel width at level `i`.
    pub fn width(&self, i: usize) -> usize {
        self.base_channels * self.multipliers[i]
    }

    /// Pixel resolution at level `i` for the configured input resolution.
    pub fn level_res(&self, i: usize) -> usize {
        self.input_res >> i
    }

    /// Dimension of the conditioning vector fed to every residual block.
    pub fn temb_dim(&self) -> usize {
        4 * self.base_channels
    }

    pub fn arch(&self) -> String {
        let mult = self
            .multipliers
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let attn = self
            .attention_resolutions
            .iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "unet:v1:res={}:base={}:mult={mult}:attn={attn}",
            self.input_res, self.base_channels
        )
    }
}

/// GN → SiLU → conv → (+ timestep projection) → GN → SiLU → conv, plus a
/// residual skip (1x1 conv when the width changes). The second convolution
/// is zero-initialized so a fresh block is an identity-plus-conditioning.
struct ResBlock<F: Scalar> {
    norm1: GroupNorm<F>,
    act1: SiLU<F>,
    conv1: Conv2d<F>,
    temb_proj: Linear<F>,
    norm2: GroupNorm<F>,
    act2: SiLU<F>,
    conv2: Conv2d<F>,
    skip: Option<Conv2d<F>>,
    /// Gradient w.r.t. this block's slice of the conditioning vector,
    /// stashed by backward for the owner to accumulate.
    gtemb: Option<Array2<F>>,
}

impl<F: Scalar> ResBlock<F> {
    fn new(in_ch: usize, out_ch: usize, temb_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        ResBlock {
            norm1: GroupNorm::new(in_ch),
            act1: SiLU::new(),
            conv1: Conv2d::new(in_ch, out_ch, 3, 1, 1, ConvInit::HeNormal, rng),
            temb_proj: Linear::new(temb_dim, out_ch, LinearInit::LeCun, rng),
            norm2: GroupNorm::new(out_ch),
            act2: SiLU::new(),
            conv2: Conv2d::new(out_ch, out_ch, 3, 1, 1, ConvInit::Zero, rng),
            skip: (in_ch != out_ch)
                .then(|| Conv2d::new(in_ch, out_ch, 1, 1, 0, ConvInit::HeNormal, rng)),
            gtemb: None,
        }
    }

    fn forward(&mut self, x: Array4<F>, temb: &Array2<F>, mode: Mode) -> Array4<F> {
        let h = self.act1.forward(self.norm1.forward(x.clone(), mode), mode);
        let mut h = self.conv1.forward(h, mode);
        let proj = self.temb_proj.forward(temb);
        let (n, c, _, _) = h.dim();
        for i in 0..n {
            for ch in 0..c {
                let add = proj[[i, ch]];
                h.index_axis_mut(Axis(0), i)
                    .index_axis_mut(Axis(0), ch)
                    .mapv_inplace(|v| v + add);
            }
        }
        let h = self.act2.forward(self.norm2.forward(h, mode), mode);
        let mut h = self.conv2.forward(h, mode);
        let sk = match &mut self.skip {
            Some(conv) => conv.forward(x, mode),
            None => x,
        };
        h.zip_mut_with(&sk, |a, &b| *a = *a + b);
        h
    }

    fn backward(&mut self, gy: Array4<F>) -> Array4<F> {
        // Residual branch.
        let g = self.conv2.backward(gy.clone());
        let g = self.norm2.backward(self.act2.backward(g));
        // Timestep projection receives the per-channel sum of gradients.
        let (n, c, _, _) = g.dim();
        let mut gproj = Array2::zeros((n, c));
        for i in 0..n {
            for ch in 0..c {
                gproj[[i, ch]] = g.index_axis(Axis(0), i).index_axis(Axis(0), ch).sum();
            }
        }
        self.gtemb = Some(self.temb_proj.backward(&gproj));
        let mut gx = self.norm1.backward(self.act1.backward(self.conv1.backward(g)));
        // Skip branch.
        match &mut self.skip {
            Some(conv) => gx.zip_mut_with(&conv.backward(gy), |a, &b| *a = *a + b),
            None => gx.zip_mut_with(&gy, |a, &b| *a = *a + b),
        }
        gx
    }

    fn take_gtemb(&mut self) -> Array2<F> {
        self.gtemb.take().expect("resblock gtemb")
    }
}

impl<F: Scalar> ParamSet<F> for ResBlock<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.temb_proj.visit_params(&join(prefix, "temb_proj"), f);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        if let Some(s) = &mut self.skip {
            s.visit_params(&join(prefix, "skip"), f);
        }
    }
}

struct EncLevel<F: Scalar> {
    res_block: ResBlock<F>,
    attn: Option<SelfAttention2d<F>>,
    down: Option<AvgPool2<F>>,
}

struct DecLevel<F: Scalar> {
    /// Upsample + 3x3 conv narrowing to this level's width (absent at the
    /// deepest level, which works at the bottleneck resolution).
    up: Option<(UpsampleNearest2<F>, Conv2d<F>)>,
    res_block: ResBlock<F>,
    attn: Option<SelfAttention2d<F>>,
}

pub struct UNet<F: Scalar> {
    pub spec: UNetSpec,
    temb_fc1: Linear<F>,
    temb_act: SiLU<F>,
    temb_fc2: Linear<F>,
    stem: Conv2d<F>,
    enc: Vec<EncLevel<F>>,
    mid: ResBlock<F>,
    /// Decoder levels stored deepest-first (index 0 = deepest).
    dec: Vec<DecLevel<F>>,
    head_norm: GroupNorm<F>,
    head_act: SiLU<F>,
    head_conv: Conv2d<F>,
    /// Skip activations saved by the encoder for the decoder.
    skips: Vec<Array4<F>>,
    temb_cache: Option<Array2<F>>,
}

impl<F: Scalar> UNet<F> {
    pub fn new(spec: UNetSpec, rng: &mut ChaCha12Rng) -> Result<Self> {
        spec.validate()?;
        let depth = spec.depth();
        let temb_dim = spec.temb_dim();

        let temb_fc1 = Linear::new(spec.base_channels, temb_dim, LinearInit::LeCun, rng);
        let temb_fc2 = Linear::new(temb_dim, temb_dim, LinearInit::LeCun, rng);
        let stem = Conv2d::new(3, spec.width(0), 3, 1, 1, ConvInit::HeNormal, rng);

        let mut enc = Vec::with_capacity(depth);
        for i in 0..depth {
            let in_ch = if i == 0 { spec.width(0) } else { spec.width(i - 1) };
            let attn = spec
                .attention_resolutions
                .contains(&spec.level_res(i))
                .then(|| SelfAttention2d::new(spec.width(i), rng));
            enc.push(EncLevel {
                res_block: ResBlock::new(in_ch, spec.width(i), temb_dim, rng),
                attn,
                down: (i + 1 < depth).then(AvgPool2::new),
            });
        }

        let deepest = spec.width(depth - 1);
        let mid = ResBlock::new(deepest, deepest, temb_dim, rng);

        // Deepest-first decoder.
        let mut dec = Vec::with_capacity(depth);
        for i in (0..depth).rev() {
            let up = (i + 1 < depth).then(|| {
                (
                    UpsampleNearest2::new(),
                    Conv2d::new(spec.width(i + 1), spec.width(i), 3, 1, 1, ConvInit::HeNormal, rng),
                )
            });
            let attn = spec
                .attention_resolutions
                .contains(&spec.level_res(i))
                .then(|| SelfAttention2d::new(spec.width(i), rng));
            dec.push(DecLevel {
                up,
                res_block: ResBlock::new(2 * spec.width(i), spec.width(i), temb_dim, rng),
                attn,
            });
        }

        Ok(UNet {
            head_norm: GroupNorm::new(spec.width(0)),
            head_act: SiLU::new(),
            head_conv: Conv2d::new(spec.width(0), 3, 3, 1, 1, ConvInit::Zero, rng),
            temb_fc1,
            temb_act: SiLU::new(),
            temb_fc2,
            stem,
            enc,
            mid,
            dec,
            skips: Vec::new(),
            temb_cache: None,
            spec,
        })
    }

    pub fn arch(&self) -> String {
        self.spec.arch()
    }

    /// Number of self-attention modules (encoder + decoder).
    pub fn attention_count(&self) -> usize {
        self.enc.iter().filter(|l| l.attn.is_some()).count()
            + self.dec.iter().filter(|l| l.attn.is_some()).count()
    }

    fn check_input(&self, x: &Array4<F>, t: &[usize]) -> Result<()> {
        let (n, c, h, w) = x.dim();
        let div = 1usize << (self.spec.depth() - 1);
        if n == 0 || c != 3 || h != w || h % div != 0 || h == 0 {
            return Err(CipherError::shape(
                "unet input",
                format!("(N>0, 3, R, R) with R divisible by {div}"),
                format!("({n}, {c}, {h}, {w})"),
            ));
        }
        if t.len() != n {
            return Err(CipherError::shape("unet timesteps", n, t.len()));
        }
        Ok(())
    }

    /// Predict the noise component of `x` at per-sample timesteps `t`.
    /// Output shape equals input shape.
    pub fn forward(&mut self, x: &Array4<F>, t: &[usize], mode: Mode) -> Result<Array4<F>> {
        self.check_input(x, t)?;

        let emb = timestep_embedding::<F>(t, self.spec.base_channels)?;
        let temb = self.temb_fc1.forward(&emb);
        let temb = self.temb_act_forward(temb);
        let temb = self.temb_fc2.forward(&temb);
        self.temb_cache = Some(temb.clone());

        let mut h = self.stem.forward(x.clone(), mode);
        self.skips.clear();
        for level in self.enc.iter_mut() {
            h = level.res_block.forward(h, &temb, mode);
            if let Some(a) = &mut level.attn {
                h = a.forward(h, mode);
            }
            self.skips.push(h.clone());
            if let Some(d) = &mut level.down {
                h = d.forward(h, mode);
            }
        }

        h = self.mid.forward(h, &temb, mode);

        for (di, level) in self.dec.iter_mut().enumerate() {
            if let Some((up, conv)) = &mut level.up {
                h = conv.forward(up.forward(h, mode), mode);
            }
            let skip = self.skips[self.spec.depth() - 1 - di].clone();
            h = concat_channels(&h, &skip);
            h = level.res_block.forward(h, &temb, mode);
            if let Some(a) = &mut level.attn {
                h = a.forward(h, mode);
            }
        }

        let h = self.head_act.forward(self.head_norm.forward(h, mode), mode);
        Ok(self.head_conv.forward(h, mode))
    }

    /// Run the stem and encoder levels only, handing each intermediate
    /// feature map to `tap` (named `stem`, then `enc{i}` after level `i`'s
    /// residual/attention pair). Used for feature extraction; the decoder
    /// never runs and the skip stack is left untouched.
    pub fn encoder_tapped(
        &mut self,
        x: &Array4<F>,
        t: &[usize],
        mode: Mode,
        tap: &mut dyn FnMut(&str, &Array4<F>),
    ) -> Result<()> {
        self.check_input(x, t)?;
        let emb = timestep_embedding::<F>(t, self.spec.base_channels)?;
        let temb = self.temb_fc1.forward(&emb);
        let temb = self.temb_act_forward(temb);
        let temb = self.temb_fc2.forward(&temb);

        let mut h = self.stem.forward(x.clone(), mode);
        tap("stem", &h);
        for (i, level) in self.enc.iter_mut().enumerate() {
            h = level.res_block.forward(h, &temb, mode);
            if let Some(a) = &mut level.attn {
                h = a.forward(h, mode);
            }
            tap(&format!("enc{i}"), &h);
            if let Some(d) = &mut level.down {
                h = d.forward(h, mode);
            }
        }
        Ok(())
    }

    /// SiLU on a 2-D activation via a temporary 4-D view (the layer works on
    /// feature maps).
    fn temb_act_forward(&mut self, x: Array2<F>) -> Array2<F> {
        let (n, d) = x.dim();
        let x4 = x.into_shape_with_order((n, d, 1, 1)).expect("temb reshape");
        let y4 = self.temb_act.forward(x4, Mode::Train);
        y4.into_shape_with_order((n, d)).expect("temb reshape")
    }

    fn temb_act_backward(&mut self, g: Array2<F>) -> Array2<F> {
        let (n, d) = g.dim();
        let g4 = g.into_shape_with_order((n, d, 1, 1)).expect("temb reshape");
        let y4 = self.temb_act.backward(g4);
        y4.into_shape_with_order((n, d)).expect("temb reshape")
    }

    /// Backpropagate output-space gradients, accumulating parameter
    /// gradients (including the shared timestep MLP). Returns the gradient
    /// w.r.t. the input.
    pub fn backward(&mut self, gy: Array4<F>) -> Array4<F> {
        let temb = self.temb_cache.take().expect("unet backward without forward");
        let mut gtemb: Array2<F> = Array2::zeros(temb.dim());

        let g = self.head_conv.backward(gy);
        let mut g = self.head_norm.backward(self.head_act.backward(g));

        let mut gskips: Vec<Option<Array4<F>>> = vec![None; self.spec.depth()];
        for (di, level) in self.dec.iter_mut().enumerate().rev() {
            if let Some(a) = &mut level.attn {
                g = a.backward(g);
            }
            g = level.res_block.backward(g);
            gtemb.zip_mut_with(&level.res_block.take_gtemb(), |a, &b| *a = *a + b);
            let (gh, gskip) = split_channels(&g, g.dim().1 / 2);
            gskips[self.spec.depth() - 1 - di] = Some(gskip);
            g = gh;
            if let Some((up, conv)) = &mut level.up {
                g = up.backward(conv.backward(g));
            }
        }

        g = self.mid.backward(g);
        gtemb.zip_mut_with(&self.mid.take_gtemb(), |a, &b| *a = *a + b);

        for (i, level) in self.enc.iter_mut().enumerate().rev() {
            if let Some(d) = &mut level.down {
                g = d.backward(g);
            }
            // The skip consumed this level's output too.
            g.zip_mut_with(gskips[i].as_ref().expect("skip grad"), |a, &b| *a = *a + b);
            if let Some(a) = &mut level.attn {
                g = a.backward(g);
            }
            g = level.res_block.backward(g);
            gtemb.zip_mut_with(&level.res_block.take_gtemb(), |a, &b| *a = *a + b);
        }
        let gx = self.stem.backward(g);

        // Shared conditioning MLP.
        let g2 = self.temb_fc2.backward(&gtemb);
        let g2 = self.temb_act_backward(g2);
        let _ = self.temb_fc1.backward(&g2);
        gx
    }
}

impl<F: Scalar> ParamSet<F> for UNet<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        self.temb_fc1.visit_params(&join(prefix, "temb.fc1"), f);
        self.temb_fc2.visit_params(&join(prefix, "temb.fc2"), f);
        self.stem.visit_params(&join(prefix, "stem"), f);
        for (i, l) in self.enc.iter_mut().enumerate() {
            l.res_block.visit_params(&join(prefix, &format!("enc{i}.res")), f);
            if let Some(a) = &mut l.attn {
                a.visit_params(&join(prefix, &format!("enc{i}.attn")), f);
            }
        }
        self.mid.visit_params(&join(prefix, "mid.res"), f);
        for (di, l) in self.dec.iter_mut().enumerate() {
            let i = self.spec.depth() - 1 - di;
            if let Some((_, conv)) = &mut l.up {
                conv.visit_params(&join(prefix, &format!("dec{i}.up")), f);
            }
            l.res_block.visit_params(&join(prefix, &format!("dec{i}.res")), f);
            if let Some(a) = &mut l.attn {
                a.visit_params(&join(prefix, &format!("dec{i}.attn")), f);
            }
        }
        self.head_norm.visit_params(&join(prefix, "head.norm"), f);
        self.head_conv.visit_params(&join(prefix, "head.conv"), f);
    }
}

fn concat_channels<F: Scalar>(a: &Array4<F>, b: &Array4<F>) -> Array4<F> {
    let (n, ca, h, w) = a.dim();
    let (nb, cb, hb, wb) = b.dim();
    assert_eq!((n, h, w), (nb, hb, wb), "concat spatial mismatch");
    let mut out = Array4::zeros((n, ca + cb, h, w));
    out.slice_mut(ndarray::s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(ndarray::s![.., ca.., .., ..]).assign(b);
    out
}

fn split_channels<F: Scalar>(g: &Array4<F>, ca: usize) -> (Array4<F>, Array4<F>) {
    (
        g.slice(ndarray::s![.., ..ca, .., ..]).to_owned(),
        g.slice(ndarray::s![.., ca.., .., ..]).to_owned(),
    )
}

/// Mean absolute difference helper used by tests.
pub fn mad<F: Scalar>(a: &Array1<F>, b: &Array1<F>) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        s += (*x - *y).to_f64().abs();
    }
    s / a.len() as f64
}
