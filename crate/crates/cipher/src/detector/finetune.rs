//! Turn a trained adversarial discriminator into a real/fake detector:
//! binary cross-entropy against smoothed labels, dropout on the final-block
//! activations (training only), flip/jitter augmentation, and a frozen
//! minibatch-std reference so the saved detector scores single images the
//! same way it scores batches.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand_chacha::ChaCha12Rng;

use crate::dataio::augment::augment;
use crate::dataio::{AugmentConfig, DataLoader, LabeledDataset, Split, LABEL_FAKE, LABEL_REAL};
use crate::error::{CipherError, Result};
use crate::nn::layers::{sigmoid, MinibatchStd};
use crate::nn::optim::Adam;
use crate::nn::param::{zero_grads, ParamFn, ParamSet};
use crate::nn::rng::seeded_rng;
use crate::nn::{checkpoint, Mode, Scalar};
use crate::progan::{stage_resolution, Discriminator, ProgressiveStage};

/// How many training images anchor the frozen minibatch-std statistic.
const REF_STD_BATCH: usize = 64;

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Binary label-smoothing strength; targets become `y(1-a) + a/2`.
    pub label_smoothing: f64,
    /// Dropout probability on the two final-block activations, active in
    /// training mode only.
    pub dropout_p: f64,
    pub augment: AugmentConfig,
    /// Update only the final block, leaving the convolutional trunk fixed.
    pub freeze_backbone: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 50,
            lr: 1e-4,
            batch_size: 64,
            label_smoothing: 0.1,
            dropout_p: 0.2,
            augment: AugmentConfig {
                hflip_prob: 0.5,
                jitter_strength: 0.2,
            },
            freeze_backbone: false,
            seed: 42,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(CipherError::Config(format!(
                "label_smoothing must be in [0,1), got {}",
                self.label_smoothing
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(CipherError::Config(format!(
                "dropout_p must be in [0,1), got {}",
                self.dropout_p
            )));
        }
        if self.batch_size == 0 {
            return Err(CipherError::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(CipherError::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        AugmentConfig::new(self.augment.hflip_prob, self.augment.jitter_strength)?;
        Ok(())
    }
}

/// Symmetric binary label smoothing: `y' = y(1-alpha) + alpha/2`. Affine and
/// order-preserving; {0,1} inputs land on `alpha/2` and `1 - alpha/2`.
pub fn smooth_labels<F: Scalar>(y: &Array1<F>, alpha: f64) -> Result<Array1<F>> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(CipherError::Domain(format!(
            "label smoothing alpha must be in [0,1), got {alpha}"
        )));
    }
    let scale = F::from_f64(1.0 - alpha);
    let shift = F::from_f64(alpha / 2.0);
    Ok(y.mapv(|v| v * scale + shift))
}

/// Class labels to smoothed regression targets.
pub fn targets_from_labels<F: Scalar>(labels: &[u8], alpha: f64) -> Result<Array1<F>> {
    let y = Array1::from_iter(labels.iter().map(|&l| F::from_f64(f64::from(l))));
    smooth_labels(&y, alpha)
}

/// Numerically stable mean binary cross-entropy on raw logits:
/// `max(z,0) - z*y + ln(1 + exp(-|z|))` per element.
pub fn bce_with_logits<F: Scalar>(logits: &Array1<F>, targets: &Array1<F>) -> F {
    assert_eq!(logits.len(), targets.len(), "bce length mismatch");
    assert!(!logits.is_empty(), "bce on empty batch");
    let mut acc = F::zero();
    for (&z, &y) in logits.iter().zip(targets.iter()) {
        let pos = if z > F::zero() { z } else { F::zero() };
        acc = acc + pos - z * y + (F::one() + (-z.abs()).exp()).ln();
    }
    acc / F::from_f64(logits.len() as f64)
}

/// Gradient of [`bce_with_logits`] w.r.t. the logits: `(sigma(z) - y) / n`.
pub fn bce_with_logits_grad<F: Scalar>(logits: &Array1<F>, targets: &Array1<F>) -> Array1<F> {
    assert_eq!(logits.len(), targets.len(), "bce length mismatch");
    let n = F::from_f64(logits.len() as f64);
    Array1::from_iter(
        logits
            .iter()
            .zip(targets.iter())
            .map(|(&z, &y)| (sigmoid(z) - y) / n),
    )
}

/// View of a discriminator with everything outside the final block marked
/// non-trainable, for the freeze ablation.
struct FinalBlockOnly<'a, F: Scalar>(&'a mut Discriminator<F>);

impl<F: Scalar> ParamSet<F> for FinalBlockOnly<'_, F> {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        self.0.visit_params(prefix, &mut |mut p| {
            if !p.name.starts_with("final") {
                p.trainable = false;
            }
            f(p);
        });
    }
}

/// The frozen minibatch-std statistic: computed over a fixed reference batch
/// of training images (manifest order, no augmentation) at the final block's
/// input. Recorded into detector checkpoints so eval-mode scoring is
/// independent of batch composition.
pub fn compute_ref_std<F: Scalar>(
    disc: &mut Discriminator<F>,
    ds: &LabeledDataset,
    run_dir: &Path,
) -> Result<F> {
    let stage = ProgressiveStage::new(disc.stages - 1, 1.0)?;
    let mut loader = DataLoader::new(stage_resolution(stage.index));
    let (batches, report) =
        loader.epoch_batches::<F>(ds, Some(Split::Train), REF_STD_BATCH, false, 0, 0, run_dir)?;
    if report.loaded == 0 {
        return Err(CipherError::Config(
            "reference-statistic pass found no decodable training images".into(),
        ));
    }
    let (x, _) = &batches[0];
    let h = disc.backbone(x, stage, Mode::Eval)?;
    Ok(MinibatchStd::statistic(&h))
}

/// Counters and artifact paths from a completed fine-tune.
#[derive(Debug)]
pub struct FinetuneStats {
    pub epochs_run: usize,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Validation accuracy per epoch (NaN when the val split is empty).
    pub val_accuracy: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub final_path: PathBuf,
    pub best_path: Option<PathBuf>,
    pub curve_path: PathBuf,
    pub ref_std: f64,
    pub warnings: Vec<String>,
}

fn detector_meta<F: Scalar>(
    disc: &Discriminator<F>,
    cfg: &FinetuneConfig,
    stage: usize,
    ref_std: F,
    epochs_run: usize,
) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), "detector".into());
    meta.insert("stage".into(), stage.to_string());
    // Enough architecture info to reconstruct the network before loading.
    meta.insert("stages".into(), disc.stages.to_string());
    meta.insert("channels".into(), disc.widths[0].to_string());
    // Bit-exact round trip for the eval-mode statistic.
    meta.insert("ref_std_bits".into(), ref_std.to_f64().to_bits().to_string());
    meta.insert("ref_std".into(), format!("{}", ref_std.to_f64()));
    meta.insert("epochs".into(), epochs_run.to_string());
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("label_smoothing".into(), cfg.label_smoothing.to_string());
    meta.insert("dropout".into(), cfg.dropout_p.to_string());
    meta
}

/// Read the frozen statistic back out of checkpoint metadata.
pub fn ref_std_from_meta(meta: &BTreeMap<String, String>) -> Option<f64> {
    meta.get("ref_std_bits")
        .and_then(|s| s.parse::<u64>().ok())
        .map(f64::from_bits)
}

/// Fine-tune a discriminator as a real/fake detector on `ds`. The final
/// detector (and, when a validation split exists, the best-validation
/// checkpoint) is written to `out_dir`. With `epochs = 0` the weights pass
/// through untouched.
pub fn finetune<F: Scalar>(
    disc: &mut Discriminator<F>,
    ds: &LabeledDataset,
    cfg: &FinetuneConfig,
    run_dir: &Path,
    out_dir: &Path,
) -> Result<FinetuneStats> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| CipherError::io(out_dir, e))?;

    let stage = ProgressiveStage::new(disc.stages - 1, 1.0)?;
    let res = stage_resolution(stage.index);
    let mut warnings = Vec::new();

    let train_idx = ds.indices_for(Some(Split::Train));
    let n_real = train_idx
        .iter()
        .filter(|&&i| ds.items[i].label == LABEL_REAL)
        .count();
    let n_fake = train_idx
        .iter()
        .filter(|&&i| ds.items[i].label == LABEL_FAKE)
        .count();
    if n_real != n_fake {
        let w = format!(
            "training split is unbalanced ({n_real} real vs {n_fake} fake); proceeding"
        );
        eprintln!("warning: {w}");
        warnings.push(w);
    }

    let curve_path = out_dir.join("finetune_curves.csv");
    let mut curve =
        BufWriter::new(File::create(&curve_path).map_err(|e| CipherError::io(&curve_path, e))?);
    writeln!(curve, "epoch,train_loss,val_accuracy")
        .map_err(|e| CipherError::io(&curve_path, e))?;

    if cfg.dropout_p > 0.0 {
        disc.enable_dropout(cfg.dropout_p, cfg.seed);
    }
    let mut aug_rng: ChaCha12Rng = seeded_rng(cfg.seed, "ft-augment");
    let mut adam: Adam<F> = Adam::new(0.9, 0.999);
    let mut loader = DataLoader::new(res);

    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut val_accuracy = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    let best_path = out_dir.join("detector_best.ckpt");
    let mut best_written = false;

    for epoch in 0..cfg.epochs {
        let (batches, report) = loader.epoch_batches::<F>(
            ds,
            Some(Split::Train),
            cfg.batch_size,
            true,
            cfg.seed,
            epoch as u64,
            run_dir,
        )?;
        if report.loaded == 0 {
            return Err(CipherError::Config(
                "fine-tuning split has no decodable images".into(),
            ));
        }

        let mut loss_sum = 0.0f64;
        let mut batch_count = 0.0f64;
        for (x, labels) in &batches {
            let mut x = x.clone();
            augment(&mut x, &cfg.augment, &mut aug_rng);
            let targets = targets_from_labels::<F>(labels, cfg.label_smoothing)?;

            zero_grads(disc);
            let logits = disc.forward(&x, stage, Mode::Train)?;
            loss_sum += bce_with_logits(&logits, &targets).to_f64();
            batch_count += 1.0;
            disc.backward(&bce_with_logits_grad(&logits, &targets));
            if cfg.freeze_backbone {
                adam.step(&mut FinalBlockOnly(disc), cfg.lr);
            } else {
                adam.step(disc, cfg.lr);
            }
        }
        let mean_loss = loss_sum / batch_count.max(1.0);
        train_loss.push(mean_loss);

        let val_acc = validation_accuracy(disc, ds, cfg, &mut loader, stage, run_dir)?;
        val_accuracy.push(val_acc);
        writeln!(curve, "{epoch},{mean_loss:.6},{val_acc:.6}")
            .map_err(|e| CipherError::io(&curve_path, e))?;

        if !val_acc.is_nan() && best.is_none_or(|(_, acc)| val_acc > acc) {
            best = Some((epoch, val_acc));
            let ref_std = compute_ref_std(disc, ds, run_dir)?;
            disc.set_ref_std(Some(ref_std));
            let meta = detector_meta(disc, cfg, stage.index, ref_std, epoch + 1);
            checkpoint::save(&best_path, &disc.arch(), &meta, disc)?;
            best_written = true;
        }
    }
    curve.flush().map_err(|e| CipherError::io(&curve_path, e))?;

    let ref_std = compute_ref_std(disc, ds, run_dir)?;
    disc.set_ref_std(Some(ref_std));
    let final_path = out_dir.join("detector.ckpt");
    let meta = detector_meta(disc, cfg, stage.index, ref_std, cfg.epochs);
    checkpoint::save(&final_path, &disc.arch(), &meta, disc)?;

    Ok(FinetuneStats {
        epochs_run: cfg.epochs,
        train_loss,
        val_accuracy,
        best_epoch: best.map(|(e, _)| e),
        final_path,
        best_path: best_written.then_some(best_path),
        curve_path,
        ref_std: ref_std.to_f64(),
        warnings,
    })
}

/// Accuracy at threshold 0.5 over the validation split in eval mode, without
/// augmentation. NaN when the split is empty.
fn validation_accuracy<F: Scalar>(
    disc: &mut Discriminator<F>,
    ds: &LabeledDataset,
    cfg: &FinetuneConfig,
    loader: &mut DataLoader,
    stage: ProgressiveStage,
    run_dir: &Path,
) -> Result<f64> {
    let (batches, report) = loader.epoch_batches::<F>(
        ds,
        Some(Split::Val),
        cfg.batch_size,
        false,
        cfg.seed,
        0,
        run_dir,
    )?;
    if report.loaded == 0 {
        return Ok(f64::NAN);
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for (x, labels) in &batches {
        let probs = disc.forward_probs(x, stage, Mode::Eval)?;
        for (&p, &l) in probs.iter().zip(labels.iter()) {
            let decided_fake = p.to_f64() >= 0.5;
            if decided_fake == (l == LABEL_FAKE) {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}
