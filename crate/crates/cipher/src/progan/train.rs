//! Progressive adversarial training loop. Stages run back to back, each at
//! double the previous resolution; within a stage the newest layers fade in
//! over the first `fade_iters` iterations. Every iteration takes one
//! discriminator step and `gd_ratio` generator steps, all with Adam and a
//! learning rate that decays linearly to zero across the whole multi-stage
//! budget.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::dataio::{DataLoader, LabeledDataset, Split};
use crate::error::{CipherError, Result};
use crate::nn::layers::sigmoid;
use crate::nn::optim::{linear_decay, Adam};
use crate::nn::param::zero_grads;
use crate::nn::rng::{randn2, seeded_rng};
use crate::nn::{checkpoint, Mode, Scalar};

use super::loss::{
    loss_d_fake_grad, loss_d_real_grad, loss_g_grad, mse_adv_losses, prob_grad_to_logit_grad,
};
use super::{fade_alpha, stage_resolution, Discriminator, Generator, ProgressiveStage};

/// Adam momentum coefficients for adversarial training (near-zero first
/// moment, as is standard for progressive GANs).
pub const ADAM_BETA1: f64 = 0.0;
pub const ADAM_BETA2: f64 = 0.99;

#[derive(Debug, Clone)]
pub struct GanTrainConfig {
    /// Number of resolutions to grow through (1 stage = 4x4 only).
    pub stages: usize,
    /// Feature width at 4x4; later stages halve it (floor 4).
    pub channels: usize,
    pub latent_dim: usize,
    pub iters_per_stage: usize,
    /// Fade-in length at the start of every stage after the first.
    pub fade_iters: usize,
    pub batch_size: usize,
    /// Peak learning rate; decays linearly to 0 over all stages.
    pub lr: f64,
    /// Generator updates per discriminator update.
    pub gd_ratio: usize,
    /// Save intermediate checkpoints every this many iterations (0 = final
    /// checkpoint only).
    pub ckpt_every: usize,
    pub seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        GanTrainConfig {
            stages: 5,
            channels: 512,
            latent_dim: 256,
            iters_per_stage: 50_000,
            fade_iters: 10_000,
            batch_size: 16,
            lr: 0.001,
            gd_ratio: 2,
            ckpt_every: 0,
            seed: 42,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(CipherError::Config(msg));
        if self.stages == 0 || self.stages > 5 {
            return err(format!(
                "gan stages must be 1..=5 (4x4 through 64x64), got {}",
                self.stages
            ));
        }
        if self.fade_iters > self.iters_per_stage {
            return err(format!(
                "fade_iters ({}) must not exceed iters_per_stage ({})",
                self.fade_iters, self.iters_per_stage
            ));
        }
        if self.iters_per_stage == 0 || self.batch_size == 0 || self.gd_ratio == 0 {
            return err("iters_per_stage, batch_size, and gd_ratio must be positive".into());
        }
        if self.channels == 0 || self.latent_dim == 0 {
            return err("channels and latent_dim must be positive".into());
        }
        if !(self.lr > 0.0) {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        Ok(())
    }
}

/// Counters and artifact paths from a completed run.
#[derive(Debug)]
pub struct GanTrainStats {
    pub d_steps: usize,
    pub g_steps: usize,
    pub final_loss_d: f64,
    pub final_loss_g: f64,
    pub disc_path: PathBuf,
    pub gen_path: PathBuf,
    pub curve_path: PathBuf,
}

fn checkpoint_meta(cfg: &GanTrainConfig, global_iter: usize) -> std::collections::BTreeMap<String, String> {
    let mut meta = std::collections::BTreeMap::new();
    meta.insert("stages".into(), cfg.stages.to_string());
    meta.insert("channels".into(), cfg.channels.to_string());
    meta.insert("latent_dim".into(), cfg.latent_dim.to_string());
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("iters_done".into(), global_iter.to_string());
    meta
}

/// Train a generator/discriminator pair on the real images in `ds`'s train
/// split. Checkpoints and the training-curve CSV are written to `out_dir`.
pub fn train_progressive<F: Scalar>(
    cfg: &GanTrainConfig,
    ds: &LabeledDataset,
    run_dir: &Path,
    out_dir: &Path,
) -> Result<GanTrainStats> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| CipherError::io(out_dir, e))?;

    let mut init_d = seeded_rng(cfg.seed, "gan-init-d");
    let mut init_g = seeded_rng(cfg.seed, "gan-init-g");
    let mut disc: Discriminator<F> = Discriminator::new(cfg.channels, cfg.stages, &mut init_d)?;
    let mut gen: Generator<F> = Generator::new(cfg.channels, cfg.stages, cfg.latent_dim, &mut init_g)?;
    let mut adam_d: Adam<F> = Adam::new(ADAM_BETA1, ADAM_BETA2);
    let mut adam_g: Adam<F> = Adam::new(ADAM_BETA1, ADAM_BETA2);
    let mut z_rng = seeded_rng(cfg.seed, "gan-z");

    let curve_path = out_dir.join("curves.csv");
    let mut curve = BufWriter::new(
        File::create(&curve_path).map_err(|e| CipherError::io(&curve_path, e))?,
    );
    writeln!(curve, "iter,stage,fade_alpha,loss_d,loss_g,lr")
        .map_err(|e| CipherError::io(&curve_path, e))?;

    let total_iters = cfg.stages * cfg.iters_per_stage;
    let mut global_iter = 0usize;
    let mut d_steps = 0usize;
    let mut g_steps = 0usize;
    let mut last_loss_d = f64::NAN;
    let mut last_loss_g = f64::NAN;

    for stage_idx in 0..cfg.stages {
        let res = stage_resolution(stage_idx);
        let mut loader = DataLoader::new(res);
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
                "gan training split has no decodable images".into(),
            ));
        }
        let mut batch_idx = 0usize;

        for iter in 0..cfg.iters_per_stage {
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
            let (x_real, _) = &batches[batch_idx];
            batch_idx += 1;
            let n = x_real.dim().0;

            let alpha = fade_alpha(stage_idx, iter, cfg.fade_iters);
            let stage = ProgressiveStage::new(stage_idx, alpha)?;
            let lr_now = linear_decay(cfg.lr, global_iter, total_iters);

            // Discriminator step. The two loss terms are separable, so the
            // real half is backpropagated before the fake forward pass
            // overwrites the layer caches.
            zero_grads(&mut disc);
            let p_real = disc.forward(x_real, stage, Mode::Train)?.mapv(sigmoid);
            disc.backward(&prob_grad_to_logit_grad(&loss_d_real_grad(&p_real), &p_real));

            let z = randn2::<F>(&mut z_rng, (n, cfg.latent_dim));
            let x_fake = gen.forward(&z, stage, Mode::Train)?;
            let p_fake = disc.forward(&x_fake, stage, Mode::Train)?.mapv(sigmoid);
            disc.backward(&prob_grad_to_logit_grad(&loss_d_fake_grad(&p_fake), &p_fake));
            adam_d.step(&mut disc, lr_now);
            d_steps += 1;
            let (loss_d, _) = mse_adv_losses(&p_real, &p_fake);
            last_loss_d = loss_d.to_f64();

            // Generator steps: gradients flow through the discriminator's
            // input back into the generator; the discriminator's own
            // parameter gradients from these passes are discarded.
            for _ in 0..cfg.gd_ratio {
                zero_grads(&mut gen);
                zero_grads(&mut disc);
                let z = randn2::<F>(&mut z_rng, (n, cfg.latent_dim));
                let x_fake = gen.forward(&z, stage, Mode::Train)?;
                let p = disc.forward(&x_fake, stage, Mode::Train)?.mapv(sigmoid);
                let gx = disc.backward(&prob_grad_to_logit_grad(&loss_g_grad(&p), &p));
                gen.backward(gx);
                adam_g.step(&mut gen, lr_now);
                g_steps += 1;
                let sq = p.mapv(|v| {
                    let e = v - F::one();
                    e * e
                });
                last_loss_g = (sq.sum() / F::from_f64(sq.len() as f64)).to_f64();
            }

            writeln!(
                curve,
                "{global_iter},{stage_idx},{alpha:.6},{last_loss_d:.6},{last_loss_g:.6},{lr_now:.8}"
            )
            .map_err(|e| CipherError::io(&curve_path, e))?;

            global_iter += 1;
            if cfg.ckpt_every > 0 && global_iter % cfg.ckpt_every == 0 && global_iter < total_iters
            {
                let meta = checkpoint_meta(cfg, global_iter);
                checkpoint::save(
                    &out_dir.join(format!("discriminator_iter{global_iter:07}.ckpt")),
                    &disc.arch(),
                    &meta,
                    &mut disc,
                )?;
                checkpoint::save(
                    &out_dir.join(format!("generator_iter{global_iter:07}.ckpt")),
                    &gen.arch(),
                    &meta,
                    &mut gen,
                )?;
            }
        }
    }
    curve.flush().map_err(|e| CipherError::io(&curve_path, e))?;

    let disc_path = out_dir.join("discriminator.ckpt");
    let gen_path = out_dir.join("generator.ckpt");
    let meta = checkpoint_meta(cfg, global_iter);
    checkpoint::save(&disc_path, &disc.arch(), &meta, &mut disc)?;
    checkpoint::save(&gen_path, &gen.arch(), &meta, &mut gen)?;

    Ok(GanTrainStats {
        d_steps,
        g_steps,
        final_loss_d: last_loss_d,
        final_loss_g: last_loss_g,
        disc_path,
        gen_path,
        curve_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{build_single_class_dataset, synth, SplitFracs};
    use tempfile::TempDir;

    fn tiny_dataset(dir: &Path, n: usize) -> LabeledDataset {
        synth::generate_corpus(dir, n, 16, 9).unwrap();
        // All-train split so every image is available to the loop.
        build_single_class_dataset(dir, None, SplitFracs::new(1.0, 0.0, 0.0).unwrap(), 1, None)
            .unwrap()
            .dataset
    }

    fn tiny_cfg() -> GanTrainConfig {
        GanTrainConfig {
            stages: 1,
            channels: 4,
            latent_dim: 4,
            iters_per_stage: 100,
            fade_iters: 0,
            batch_size: 4,
            lr: 0.001,
            gd_ratio: 2,
            ckpt_every: 0,
            seed: 7,
        }
    }

    #[test]
    fn step_ratio_audit_two_to_one() {
        let tmp = TempDir::new().unwrap();
        let data_dir = tmp.path().join("data");
        let out = tmp.path().join("gan");
        let ds = tiny_dataset(&data_dir, 8);

        let stats = train_progressive::<f32>(&tiny_cfg(), &ds, tmp.path(), &out).unwrap();
        // 100 iterations at 2:1 → 300 optimizer steps total.
        assert_eq!(stats.d_steps, 100);
        assert_eq!(stats.g_steps, 200);
        assert_eq!(stats.d_steps + stats.g_steps, 300);
        assert!(stats.final_loss_d.is_finite());
        assert!(stats.final_loss_g.is_finite());
        assert!(stats.disc_path.exists());
        assert!(stats.gen_path.exists());
    }

    #[test]
    fn curve_records_monotone_fade_reaching_one() {
        let tmp = TempDir::new().unwrap();
        let data_dir = tmp.path().join("data");
        let out = tmp.path().join("gan");
        let ds = tiny_dataset(&data_dir, 8);

        let cfg = GanTrainConfig {
            stages: 2,
            iters_per_stage: 6,
            fade_iters: 4,
            ..tiny_cfg()
        };
        let stats = train_progressive::<f32>(&cfg, &ds, tmp.path(), &out).unwrap();

        let text = std::fs::read_to_string(&stats.curve_path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "iter,stage,fade_alpha,loss_d,loss_g,lr");
        let mut stage1_alphas = Vec::new();
        let mut lrs = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            assert_eq!(f.len(), 6);
            if f[1] == "1" {
                stage1_alphas.push(f[2].parse::<f64>().unwrap());
            }
            lrs.push(f[5].parse::<f64>().unwrap());
        }
        assert_eq!(stage1_alphas, vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.0]);
        // Learning rate decays strictly across the whole budget.
        for w in lrs.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn final_checkpoints_reload_into_fresh_networks() {
        let tmp = TempDir::new().unwrap();
        let data_dir = tmp.path().join("data");
        let out = tmp.path().join("gan");
        let ds = tiny_dataset(&data_dir, 6);

        let cfg = GanTrainConfig {
            iters_per_stage: 3,
            ..tiny_cfg()
        };
        let stats = train_progressive::<f32>(&cfg, &ds, tmp.path(), &out).unwrap();

        let mut rng = seeded_rng(0, "reload");
        let mut d: Discriminator<f32> = Discriminator::new(cfg.channels, cfg.stages, &mut rng).unwrap();
        let meta = checkpoint::load(&stats.disc_path, &d.arch(), &mut d).unwrap();
        assert_eq!(meta.get("iters_done").unwrap(), "3");
        let mut g: Generator<f32> =
            Generator::new(cfg.channels, cfg.stages, cfg.latent_dim, &mut rng).unwrap();
        checkpoint::load(&stats.gen_path, &g.arch(), &mut g).unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = tiny_cfg();
        cfg.fade_iters = cfg.iters_per_stage + 1;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.stages = 6;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.gd_ratio = 0;
        assert!(cfg.validate().is_err());
    }
}
