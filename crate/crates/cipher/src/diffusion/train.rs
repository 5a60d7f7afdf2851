//! Denoising training loop. Every step draws per-sample timesteps and
//! Gaussian noise, forms the noised batch in closed form, and regresses the
//! network's output onto the noise with a plain mean-squared error. Adam with
//! cosine-annealed learning rate; periodic checkpoints come with a small
//! sampled preview grid so a run can be eyeballed without a separate tool.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::dataio::{raster, DataLoader, LabeledDataset, Split};
use crate::error::{CipherError, Result};
use crate::nn::optim::{cosine_decay, Adam};
use crate::nn::param::zero_grads;
use crate::nn::rng::{randn4, seeded_rng};
use crate::nn::{checkpoint, Mode, Scalar};

use super::sample::{ddim_sample, DdimSamplerConfig};
use super::schedule::{make_schedule, q_sample, NoiseSchedule};
use super::unet::{UNet, UNetSpec};

#[derive(Debug, Clone)]
pub struct DiffusionTrainConfig {
    /// Number of forward-process steps (timesteps run 1..=t_max).
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Peak learning rate; cosine-annealed to 0 over `iterations`.
    pub lr: f64,
    /// Square image edge the model is built for.
    pub input_res: usize,
    pub base_channels: usize,
    pub multipliers: Vec<usize>,
    /// Feature-map edges that get a self-attention block.
    pub attention_resolutions: Vec<usize>,
    /// Save intermediate checkpoints plus a preview grid every this many
    /// iterations (0 = final checkpoint only).
    pub ckpt_every: usize,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            iterations: 100_000,
            batch_size: 32,
            lr: 2e-4,
            input_res: 64,
            base_channels: 64,
            multipliers: vec![1, 2, 4],
            attention_resolutions: vec![32],
            ckpt_every: 0,
            seed: 42,
        }
    }
}

impl DiffusionTrainConfig {
    pub fn unet_spec(&self) -> UNetSpec {
        UNetSpec {
            input_res: self.input_res,
            base_channels: self.base_channels,
            multipliers: self.multipliers.clone(),
            attention_resolutions: self.attention_resolutions.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(CipherError::Config(
                "iterations and batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(CipherError::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        // Schedule and network parameters get the detailed checks.
        make_schedule(self.t_max, self.beta_start, self.beta_end)?;
        self.unet_spec().validate()
    }
}

/// A training batch after the forward noising process: per-sample timesteps,
/// the noise that was injected, and the resulting noised images.
pub struct NoisedBatch<F> {
    pub t: Vec<usize>,
    pub eps: Array4<F>,
    pub x_t: Array4<F>,
}

/// Draw one noised batch from clean images: timesteps uniform on 1..=t_max
/// independently per sample, noise i.i.d. standard normal.
pub fn draw_noise_batch<F: Scalar>(
    sched: &NoiseSchedule,
    x0: &Array4<F>,
    rng: &mut ChaCha12Rng,
) -> Result<NoisedBatch<F>> {
    let n = x0.dim().0;
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(1..=sched.t_max())).collect();
    let eps = randn4::<F>(rng, x0.dim());
    let x_t = q_sample(x0, &t, &eps, sched)?;
    Ok(NoisedBatch { t, eps, x_t })
}

/// Mean squared error between predicted and true noise, averaged over every
/// element of the batch.
pub fn eps_mse<F: Scalar>(pred: &Array4<F>, eps: &Array4<F>) -> F {
    assert_eq!(pred.dim(), eps.dim(), "eps_mse shape mismatch");
    let mut acc = F::zero();
    for (p, e) in pred.iter().zip(eps.iter()) {
        let d = *p - *e;
        acc = acc + d * d;
    }
    acc / F::from_f64(pred.len() as f64)
}

/// Gradient of [`eps_mse`] with respect to the prediction: `2(pred-eps)/N`.
pub fn eps_mse_grad<F: Scalar>(pred: &Array4<F>, eps: &Array4<F>) -> Array4<F> {
    assert_eq!(pred.dim(), eps.dim(), "eps_mse_grad shape mismatch");
    let scale = F::from_f64(2.0 / pred.len() as f64);
    let mut g = pred.clone();
    g.zip_mut_with(eps, |p, e| *p = (*p - *e) * scale);
    g
}

/// Evaluate the denoising loss on one batch without touching gradients.
pub fn ddpm_loss<F: Scalar>(
    model: &mut UNet<F>,
    sched: &NoiseSchedule,
    x0: &Array4<F>,
    rng: &mut ChaCha12Rng,
    mode: Mode,
) -> Result<F> {
    let nb = draw_noise_batch(sched, x0, rng)?;
    let pred = model.forward(&nb.x_t, &nb.t, mode)?;
    Ok(eps_mse(&pred, &nb.eps))
}

/// One full training step's worth of gradient: forward in train mode, then
/// backpropagate the loss gradient, accumulating into the model's parameter
/// gradients. Returns the loss value.
pub fn ddpm_loss_step<F: Scalar>(
    model: &mut UNet<F>,
    sched: &NoiseSchedule,
    x0: &Array4<F>,
    rng: &mut ChaCha12Rng,
) -> Result<F> {
    let nb = draw_noise_batch(sched, x0, rng)?;
    let pred = model.forward(&nb.x_t, &nb.t, Mode::Train)?;
    let loss = eps_mse(&pred, &nb.eps);
    model.backward(eps_mse_grad(&pred, &nb.eps));
    Ok(loss)
}

/// Counters and artifact paths from a completed run.
#[derive(Debug)]
pub struct DiffusionTrainStats {
    /// Per-iteration loss values, in order.
    pub losses: Vec<f64>,
    pub net_path: PathBuf,
    pub curve_path: PathBuf,
}

fn checkpoint_meta(cfg: &DiffusionTrainConfig, iters_done: usize) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("t_max".into(), cfg.t_max.to_string());
    meta.insert("beta_start".into(), cfg.beta_start.to_string());
    meta.insert("beta_end".into(), cfg.beta_end.to_string());
    meta.insert("input_res".into(), cfg.input_res.to_string());
    meta.insert("base_channels".into(), cfg.base_channels.to_string());
    meta.insert(
        "multipliers".into(),
        cfg.multipliers
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("iters_done".into(), iters_done.to_string());
    meta
}

/// Lay a batch of images out in a row-major grid on a single canvas, for
/// quick visual inspection of checkpoints. Unused cells stay black.
fn tile_grid<F: Scalar>(images: &Array4<F>, cols: usize) -> Array3<F> {
    let (n, c, h, w) = images.dim();
    let cols = cols.max(1);
    let rows = n.div_ceil(cols);
    let mut canvas = Array3::from_elem((c, rows * h, cols * w), F::from_f64(-1.0));
    for i in 0..n {
        let (r0, c0) = ((i / cols) * h, (i % cols) * w);
        canvas
            .slice_mut(ndarray::s![.., r0..r0 + h, c0..c0 + w])
            .assign(&images.index_axis(ndarray::Axis(0), i));
    }
    canvas
}

fn save_preview<F: Scalar>(
    model: &mut UNet<F>,
    sched: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
    path: &Path,
) -> Result<()> {
    let sampler = DdimSamplerConfig {
        num_steps: sched.t_max().min(16),
        batch_size: 4,
        seed: cfg.seed,
    };
    let images = ddim_sample(model, sched, &sampler, 4, cfg.input_res)?;
    let grid = tile_grid(&images, 2);
    raster::save_png(&grid.view(), path)
}

/// Train a noise-prediction network on the real images in `ds`'s train split.
/// Checkpoints and the loss-curve CSV are written to `out_dir`.
pub fn train_diffusion<F: Scalar>(
    cfg: &DiffusionTrainConfig,
    ds: &LabeledDataset,
    run_dir: &Path,
    out_dir: &Path,
) -> Result<DiffusionTrainStats> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| CipherError::io(out_dir, e))?;

    let sched = make_schedule(cfg.t_max, cfg.beta_start, cfg.beta_end)?;
    let mut init = seeded_rng(cfg.seed, "diff-init");
    let mut net: UNet<F> = UNet::new(cfg.unet_spec(), &mut init)?;
    let mut noise_rng = seeded_rng(cfg.seed, "diff-noise");
    let mut adam: Adam<F> = Adam::new(0.9, 0.999);

    let curve_path = out_dir.join("curves.csv");
    let mut curve =
        BufWriter::new(File::create(&curve_path).map_err(|e| CipherError::io(&curve_path, e))?);
    writeln!(curve, "iter,loss,lr").map_err(|e| CipherError::io(&curve_path, e))?;

    let mut loader = DataLoader::new(cfg.input_res);
    let mut epoch = 0u64;
    let (mut batches, report) = loader.epoch_batches::<F>(
        ds,
        Some(Split::Train),
        cfg.batch_size,
        true,
        cfg.seed,
        epoch,
        run_dir,
    )?;
    if report.loaded == 0 {
        return Err(CipherError::Config(
            "diffusion training split has no decodable images".into(),
        ));
    }
    let mut batch_idx = 0usize;

    let mut losses = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        if batch_idx >= batches.len() {
            epoch += 1;
            batch_idx = 0;
            (batches, _) = loader.epoch_batches::<F>(
                ds,
                Some(Split::Train),
                cfg.batch_size,
                true,
                cfg.seed,
                epoch,
                run_dir,
            )?;
        }
        let (x0, _) = &batches[batch_idx];
        batch_idx += 1;

        let lr_now = cosine_decay(cfg.lr, iter, cfg.iterations);
        zero_grads(&mut net);
        let loss = ddpm_loss_step(&mut net, &sched, x0, &mut noise_rng)?.to_f64();
        adam.step(&mut net, lr_now);
        losses.push(loss);

        writeln!(curve, "{iter},{loss:.6},{lr_now:.8}")
            .map_err(|e| CipherError::io(&curve_path, e))?;

        let done = iter + 1;
        if cfg.ckpt_every > 0 && done % cfg.ckpt_every == 0 && done < cfg.iterations {
            let meta = checkpoint_meta(cfg, done);
            checkpoint::save(
                &out_dir.join(format!("unet_iter{done:07}.ckpt")),
                &net.arch(),
                &meta,
                &mut net,
            )?;
            save_preview(&mut net, &sched, cfg, &out_dir.join(format!("preview_iter{done:07}.png")))?;
        }
    }
    curve.flush().map_err(|e| CipherError::io(&curve_path, e))?;

    let net_path = out_dir.join("unet.ckpt");
    let meta = checkpoint_meta(cfg, cfg.iterations);
    checkpoint::save(&net_path, &net.arch(), &meta, &mut net)?;

    Ok(DiffusionTrainStats {
        losses,
        net_path,
        curve_path,
    })
}
