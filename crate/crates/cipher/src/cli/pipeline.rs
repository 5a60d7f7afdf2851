//! Command implementations behind the `cipher` binary. Every command works
//! inside one run directory (`runs/<name>/` by default, `CIPHER_RUNS_DIR`
//! overrides the root), reads its inputs from earlier commands' artifacts,
//! and appends to the run's event log.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array4, Axis};
use sha2::{Digest, Sha256};

use crate::dataio::{
    augment::AugmentConfig,
    dataset::{
        build_balanced_dataset, build_single_class_dataset, read_manifest, resolve_path,
        write_manifest, DataLoader, LabeledDataset, Split, SplitFracs,
    },
    raster, synth,
};
use crate::detector::{
    detect, ensemble_score, finetune, ref_std_from_meta, DetectionScore, FinetuneConfig,
};
use crate::diffusion::{
    ddim_sample_each, make_schedule, train_diffusion, DdimSamplerConfig, DiffusionTrainConfig,
    UNet, UNetSpec,
};
use crate::error::{CipherError, Result};
use crate::evalharness::{emit_table, evaluate_cross, parse_registry, write_report_csv, TableFormat};
use crate::nn::rng::seeded_rng;
use crate::nn::{checkpoint, Scalar};
use crate::progan::{train_progressive, Discriminator, GanTrainConfig};

use super::config::Config;

/// Root directory holding all runs; `CIPHER_RUNS_DIR` overrides the default
/// `runs` (relative to the working directory).
pub fn runs_root() -> PathBuf {
    std::env::var_os("CIPHER_RUNS_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A resolved run directory plus the configuration in effect for this
/// invocation. The first command to touch a run freezes its resolved config
/// as `config.resolved`; later invocations load that file as a base layer so
/// a bare `cipher train-gan --run X` picks up exactly what `prepare` used.
pub struct RunContext {
    pub cfg: Config,
    pub dir: PathBuf,
}

impl RunContext {
    pub fn open(cfg: Config) -> Result<RunContext> {
        RunContext::open_at(&runs_root(), cfg)
    }

    pub fn open_at(root: &Path, cfg: Config) -> Result<RunContext> {
        let name = cfg.require("run.name")?;
        if name.is_empty() || name.contains('/') || name.contains('\\') {
            return Err(CipherError::Config(format!(
                "run.name must be a plain directory name, got {name:?}"
            )));
        }
        let dir = root.join(name);
        for sub in ["data", "gan", "diffusion", "fakes", "detector", "reports"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| CipherError::io(&d, e))?;
        }
        let frozen_path = dir.join("config.resolved");
        let cfg = if frozen_path.exists() {
            let mut merged = Config::from_file(&frozen_path)?;
            merged.merge(&cfg);
            merged
        } else {
            fs::write(&frozen_path, cfg.resolved_text())
                .map_err(|e| CipherError::io(&frozen_path, e))?;
            cfg
        };
        Ok(RunContext { cfg, dir })
    }

    /// Append one line to the run's plain-text event log.
    pub fn log_event(&self, msg: &str) {
        let path = self.dir.join("events.log");
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        if let Ok(mut f) = fs::OpenOptions::new().create(true).append(true).open(&path) {
            let _ = writeln!(f, "{secs}\t{msg}");
        }
    }

    /// Path to an artifact a command depends on, or an error that names the
    /// missing file and how to produce it.
    pub fn expect_artifact(&self, rel: &str, hint: &str) -> Result<PathBuf> {
        let p = self.dir.join(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(CipherError::Config(format!(
                "missing artifact {}: {hint}",
                p.display()
            )))
        }
    }
}

/// Exclusive-writer lock for a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<RunLock> {
        let path = run_dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CipherError::Config(format!(
                    "run directory {} is locked ({} exists); another command may be running, \
                     or remove the file if it is stale",
                    run_dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(CipherError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Dispatch one CLI command under the run lock, logging start and outcome.
pub fn run_command<F: Scalar>(cmd: &str, ctx: &RunContext, extra: &[String]) -> Result<()> {
    let _lock = RunLock::acquire(&ctx.dir)?;
    ctx.log_event(&format!("{cmd} start"));
    let result = match cmd {
        "prepare" => cmd_prepare(ctx),
        "train-gan" => cmd_train_gan::<F>(ctx),
        "train-diffusion" => cmd_train_diffusion::<F>(ctx),
        "generate" => cmd_generate::<F>(ctx),
        "finetune" => cmd_finetune::<F>(ctx),
        "detect" => cmd_detect::<F>(ctx, extra, &mut std::io::stdout()),
        "evaluate" => cmd_evaluate::<F>(ctx),
        other => Err(CipherError::Config(format!("unknown command '{other}'"))),
    };
    match &result {
        Ok(()) => ctx.log_event(&format!("{cmd} done")),
        Err(e) => ctx.log_event(&format!("{cmd} failed: {e}")),
    }
    result
}

// ---------------------------------------------------------------------------
// prepare

/// Resolve a user-supplied directory value: `@synth` materializes the
/// deterministic procedural corpus inside the run, `@run/...` is
/// run-relative, anything else is taken as a filesystem path.
fn resolve_source_dir(ctx: &RunContext, value: &str, n: usize) -> Result<PathBuf> {
    if value == "@synth" {
        let dir = ctx.dir.join("data").join("synth_real");
        let res = ctx.cfg.get_usize("data.resolution")?;
        synth::generate_corpus(&dir, n, res, ctx.cfg.data_seed()?)?;
        return Ok(dir);
    }
    Ok(resolve_path(&ctx.dir, value))
}

pub fn cmd_prepare(ctx: &RunContext) -> Result<()> {
    let cfg = &ctx.cfg;
    let n = cfg.get_usize("data.n_per_class")?;
    let fracs = SplitFracs::new(
        cfg.get_f64("data.train_frac")?,
        cfg.get_f64("data.val_frac")?,
        cfg.get_f64("data.test_frac")?,
    )?;
    let seed = cfg.data_seed()?;
    let real_dir = resolve_source_dir(ctx, cfg.require("data.real_dir")?, n)?;

    let outcome = build_single_class_dataset(&real_dir, Some(n), fracs, seed, Some(&ctx.dir))?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let real_manifest = ctx.dir.join("data").join("real.tsv");
    write_manifest(&outcome.dataset, &real_manifest)?;
    println!(
        "real manifest: {} items -> {}",
        outcome.dataset.items.len(),
        real_manifest.display()
    );

    if let Some(fake_value) = cfg.get("data.fake_dir") {
        let fake_dir = resolve_source_dir(ctx, fake_value, n)?;
        let outcome = build_balanced_dataset(&real_dir, &fake_dir, n, fracs, seed, Some(&ctx.dir))?;
        for w in &outcome.warnings {
            eprintln!("warning: {w}");
        }
        let path = ctx.dir.join("data").join("balanced.tsv");
        write_manifest(&outcome.dataset, &path)?;
        let train = outcome.dataset.indices_for(Some(Split::Train)).len();
        let val = outcome.dataset.indices_for(Some(Split::Val)).len();
        let test = outcome.dataset.indices_for(Some(Split::Test)).len();
        println!(
            "balanced manifest: {} items (train {train} / val {val} / test {test}) -> {}",
            outcome.dataset.items.len(),
            path.display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train-gan / train-diffusion

fn load_real_dataset(ctx: &RunContext) -> Result<LabeledDataset> {
    let manifest = ctx.expect_artifact("data/real.tsv", "run `cipher prepare` first")?;
    read_manifest(&manifest)
}

pub fn cmd_train_gan<F: Scalar>(ctx: &RunContext) -> Result<()> {
    let cfg = &ctx.cfg;
    let gcfg = GanTrainConfig {
        stages: cfg.get_usize("gan.stages")?,
        channels: cfg.get_usize("gan.channels")?,
        latent_dim: cfg.get_usize("gan.latent_dim")?,
        iters_per_stage: cfg.get_usize("gan.iters_per_stage")?,
        fade_iters: cfg.get_usize("gan.fade_iters")?,
        batch_size: cfg.get_usize("gan.batch_size")?,
        lr: cfg.get_f64("gan.lr")?,
        gd_ratio: cfg.get_usize("gan.gd_ratio")?,
        ckpt_every: cfg.get_usize("gan.ckpt_every")?,
        seed: cfg.seed()?,
    };
    let ds = load_real_dataset(ctx)?;
    let stats = train_progressive::<F>(&gcfg, &ds, &ctx.dir, &ctx.dir.join("gan"))?;
    println!(
        "gan: {} d-steps / {} g-steps, final loss_d {:.4} loss_g {:.4}",
        stats.d_steps, stats.g_steps, stats.final_loss_d, stats.final_loss_g
    );
    println!("gan: discriminator -> {}", stats.disc_path.display());
    Ok(())
}

fn diffusion_config(cfg: &Config) -> Result<DiffusionTrainConfig> {
    Ok(DiffusionTrainConfig {
        t_max: cfg.get_usize("diff.T")?,
        beta_start: cfg.get_f64("diff.beta_start")?,
        beta_end: cfg.get_f64("diff.beta_end")?,
        iterations: cfg.get_usize("diff.iterations")?,
        batch_size: cfg.get_usize("diff.batch_size")?,
        lr: cfg.get_f64("diff.lr")?,
        input_res: cfg.get_usize("data.resolution")?,
        base_channels: cfg.get_usize("diff.base_channels")?,
        multipliers: cfg.get_list("diff.multipliers")?,
        ckpt_every: cfg.get_usize("diff.ckpt_every")?,
        seed: cfg.seed()?,
        ..DiffusionTrainConfig::default()
    })
}

pub fn cmd_train_diffusion<F: Scalar>(ctx: &RunContext) -> Result<()> {
    let tcfg = diffusion_config(&ctx.cfg)?;
    let ds = load_real_dataset(ctx)?;
    let stats = train_diffusion::<F>(&tcfg, &ds, &ctx.dir, &ctx.dir.join("diffusion"))?;
    let last = stats.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "diffusion: {} iterations, final loss {last:.4}",
        stats.losses.len()
    );
    println!("diffusion: model -> {}", stats.net_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// generate

pub fn cmd_generate<F: Scalar>(ctx: &RunContext) -> Result<()> {
    let cfg = &ctx.cfg;
    let ckpt = ctx.expect_artifact("diffusion/unet.ckpt", "run `cipher train-diffusion` first")?;
    let tcfg = diffusion_config(cfg)?;
    let spec = UNetSpec {
        input_res: tcfg.input_res,
        base_channels: tcfg.base_channels,
        multipliers: tcfg.multipliers.clone(),
        attention_resolutions: tcfg.attention_resolutions.clone(),
    };
    let mut rng = seeded_rng(tcfg.seed, "gen-init");
    let mut unet: UNet<F> = UNet::new(spec, &mut rng)?;
    checkpoint::load(&ckpt, &unet.arch(), &mut unet)?;
    let sched = make_schedule(tcfg.t_max, tcfg.beta_start, tcfg.beta_end)?;

    let scfg = DdimSamplerConfig {
        num_steps: cfg.get_usize("ddim.steps")?,
        batch_size: tcfg.batch_size,
        seed: cfg.get_u64("ddim.seed")?,
    };
    let count = cfg.get_usize("gen.count")?;
    let fakes_dir = ctx.dir.join("fakes");
    ddim_sample_each(&mut unet, &sched, &scfg, count, tcfg.input_res, &mut |start, batch| {
        for k in 0..batch.dim().0 {
            let path = fakes_dir.join(format!("fake_{:05}.png", start + k));
            raster::save_png(&batch.index_axis(Axis(0), k), &path)?;
        }
        Ok(())
    })?;

    // Sampling manifest: enough to re-create or audit the batch.
    let ckpt_bytes = fs::read(&ckpt).map_err(|e| CipherError::io(&ckpt, e))?;
    let digest = hex(&Sha256::digest(&ckpt_bytes));
    let manifest = format!(
        "checkpoint = @run/diffusion/unet.ckpt\ncheckpoint_sha256 = {digest}\ncount = {count}\nsteps = {}\nseed = {}\nresolution = {}\n",
        scfg.num_steps, scfg.seed, tcfg.input_res
    );
    let manifest_path = fakes_dir.join("generation.txt");
    fs::write(&manifest_path, manifest).map_err(|e| CipherError::io(&manifest_path, e))?;
    println!("generate: {count} fakes -> {}", fakes_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// finetune

/// Rebuild a discriminator-shaped network from checkpoint metadata and load
/// the stored weights into it.
fn load_discriminator<F: Scalar>(path: &Path) -> Result<(Discriminator<F>, std::collections::BTreeMap<String, String>)> {
    let meta = checkpoint::read_meta(path)?;
    let need = |key: &str| -> Result<usize> {
        meta.get(key)
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| {
                CipherError::Checkpoint(format!(
                    "{}: metadata key '{key}' missing or invalid",
                    path.display()
                ))
            })
    };
    let stages = need("stages")?;
    let channels = need("channels")?;
    let mut rng = seeded_rng(0, "disc-load");
    let mut disc: Discriminator<F> = Discriminator::new(channels, stages, &mut rng)?;
    let meta = checkpoint::load(path, &disc.arch(), &mut disc)?;
    Ok((disc, meta))
}

pub fn cmd_finetune<F: Scalar>(ctx: &RunContext) -> Result<()> {
    let cfg = &ctx.cfg;
    let ckpt = ctx.expect_artifact("gan/discriminator.ckpt", "run `cipher train-gan` first")?;
    let manifest = ctx.expect_artifact(
        "data/balanced.tsv",
        "run `cipher prepare --fake @run/fakes` after `cipher generate` to build the balanced dataset",
    )?;
    let ds = read_manifest(&manifest)?;
    let (mut disc, _) = load_discriminator::<F>(&ckpt)?;

    let fcfg = FinetuneConfig {
        epochs: cfg.get_usize("ft.epochs")?,
        lr: cfg.get_f64("ft.lr")?,
        batch_size: cfg.get_usize("ft.batch_size")?,
        label_smoothing: cfg.get_f64("ft.label_smoothing")?,
        dropout_p: cfg.get_f64("ft.dropout")?,
        augment: AugmentConfig::new(
            cfg.get_f64("augment.hflip_prob")?,
            cfg.get_f64("augment.jitter")?,
        )?,
        freeze_backbone: cfg.get_bool("ft.freeze_backbone")?,
        seed: cfg.seed()?,
    };
    let stats = finetune(&mut disc, &ds, &fcfg, &ctx.dir, &ctx.dir.join("detector"))?;
    for w in &stats.warnings {
        eprintln!("warning: {w}");
    }
    let last_acc = stats.val_accuracy.last().copied().unwrap_or(f64::NAN);
    println!(
        "finetune: {} epochs, final val accuracy {last_acc:.4}",
        stats.epochs_run
    );
    if let Some(best) = stats.best_epoch {
        println!("finetune: best validation at epoch {best}");
    }
    println!("finetune: detector -> {}", stats.final_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// detect

fn load_detector<F: Scalar>(path: &Path) -> Result<Discriminator<F>> {
    let (mut disc, meta) = load_discriminator::<F>(path)?;
    // Restore the frozen eval-mode batch statistic; without it, scores would
    // depend on batch composition.
    if let Some(rs) = ref_std_from_meta(&meta) {
        disc.set_ref_std(Some(F::from_f64(rs)));
    }
    Ok(disc)
}

pub fn cmd_detect<F: Scalar>(
    ctx: &RunContext,
    images: &[String],
    out: &mut dyn Write,
) -> Result<()> {
    let cfg = &ctx.cfg;
    if images.is_empty() {
        return Err(CipherError::Config(
            "detect needs at least one image path argument".into(),
        ));
    }
    let ckpt_list: Vec<String> = match cfg.get("detect.checkpoints") {
        Some(v) => v.split(',').map(|s| s.trim().to_string()).collect(),
        None => vec!["@run/detector/detector.ckpt".to_string()],
    };
    let threshold = cfg.get_f64("detect.threshold")?;

    let mut members: Vec<Vec<f64>> = Vec::new();
    let mut x: Option<Array4<F>> = None;
    for spec in &ckpt_list {
        let path = resolve_path(&ctx.dir, spec);
        if !path.exists() {
            return Err(CipherError::Config(format!(
                "missing detector checkpoint {}: run `cipher finetune` first",
                path.display()
            )));
        }
        let mut disc = load_detector::<F>(&path)?;
        if x.is_none() {
            // Decode once at the detector's input resolution.
            let res = crate::progan::stage_resolution(disc.stages - 1);
            let mut loader = DataLoader::new(res);
            let mut batch: Array4<F> = Array4::zeros((images.len(), 3, res, res));
            for (i, img) in images.iter().enumerate() {
                let t = loader.load_tensor(img, &ctx.dir)?;
                batch
                    .index_axis_mut(Axis(0), i)
                    .assign(&t.mapv(|v| F::from_f64(v as f64)));
            }
            x = Some(batch);
        }
        let scores = detect(&mut disc, x.as_ref().unwrap(), threshold)?;
        members.push(scores.iter().map(|s| s.probability).collect());
    }

    let probs = if members.len() == 1 {
        members.pop().unwrap()
    } else {
        let weights = match cfg.get("ensemble.weights") {
            Some(_) => Some(cfg.get_list::<f64>("ensemble.weights")?),
            None => None,
        };
        ensemble_score(&members, weights.as_deref())?
    };
    for (img, p) in images.iter().zip(&probs) {
        let score = DetectionScore::new(*p, threshold);
        writeln!(out, "{img}\t{:.4}\t{}", score.probability, score.decision)
            .map_err(|e| CipherError::io(Path::new("stdout"), e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

pub fn cmd_evaluate<F: Scalar>(ctx: &RunContext) -> Result<()> {
    let cfg = &ctx.cfg;
    let ckpt = ctx.expect_artifact("detector/detector.ckpt", "run `cipher finetune` first")?;
    let mut disc = load_detector::<F>(&ckpt)?;
    let threshold = cfg.get_f64("detect.threshold")?;

    let mut corpora: Vec<(String, LabeledDataset)> = Vec::new();
    match cfg.get("eval.registry") {
        Some(reg) => {
            let reg_path = resolve_path(&ctx.dir, reg);
            for entry in parse_registry(&reg_path)? {
                let manifest = resolve_path(&ctx.dir, &entry.manifest.to_string_lossy());
                let mut ds = read_manifest(&manifest)?;
                if let Some(split) = entry.split {
                    ds.items.retain(|it| it.split == split);
                }
                corpora.push((entry.name, ds));
            }
        }
        None => {
            // Default protocol: the held-out test split of the balanced
            // dataset (real images vs this run's own fakes).
            let manifest = ctx.expect_artifact(
                "data/balanced.tsv",
                "run `cipher prepare --fake @run/fakes` first, or point eval.registry at a corpus list",
            )?;
            let mut ds = read_manifest(&manifest)?;
            ds.items.retain(|it| it.split == Split::Test);
            corpora.push(("own-fakes".to_string(), ds));
        }
    }

    let detector_id = "cipher-disc";
    let config_hash = hex(&checkpoint::arch_hash(&cfg.resolved_text())[..8]);
    let report = evaluate_cross(
        &corpora,
        None,
        &mut disc,
        threshold,
        &ctx.dir,
        detector_id,
        &config_hash,
    )?;

    let out_dir = ctx.dir.join("reports").join(detector_id);
    fs::create_dir_all(&out_dir).map_err(|e| CipherError::io(&out_dir, e))?;
    let ts = report.timestamp.trim_start_matches("unix:");
    let csv_path = out_dir.join(format!("{ts}.csv"));
    let md_path = out_dir.join(format!("{ts}.md"));
    let detail_path = out_dir.join(format!("{ts}.detail.csv"));
    emit_table(&report, TableFormat::Csv, &csv_path)?;
    emit_table(&report, TableFormat::Markdown, &md_path)?;
    write_report_csv(&report, &detail_path)?;

    let table = fs::read_to_string(&md_path).map_err(|e| CipherError::io(&md_path, e))?;
    print!("{table}");
    println!(
        "evaluate: average accuracy {:.2}%, F1 {:.2}% -> {}",
        report.average.accuracy,
        report.average.f1,
        csv_path.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn cfg_of(text: &str) -> Config {
        Config::parse(text, "test").unwrap()
    }

    #[test]
    fn lock_is_exclusive_and_released_on_drop() {
        let tmp = TempDir::new().unwrap();
        let lock = RunLock::acquire(tmp.path()).unwrap();
        let err = RunLock::acquire(tmp.path()).unwrap_err().to_string();
        assert!(err.contains(".lock"), "{err}");
        drop(lock);
        RunLock::acquire(tmp.path()).unwrap();
    }

    #[test]
    fn open_freezes_config_once_and_layers_overrides() {
        let tmp = TempDir::new().unwrap();
        let ctx = RunContext::open_at(tmp.path(), cfg_of("run.name = r1\nseed = 7\n")).unwrap();
        assert_eq!(ctx.cfg.seed().unwrap(), 7);
        let frozen = tmp.path().join("r1").join("config.resolved");
        let first = std::fs::read_to_string(&frozen).unwrap();
        assert!(first.contains("seed = 7\n"));

        // Re-open with a new override: effective config changes, frozen
        // file does not.
        let ctx2 = RunContext::open_at(
            tmp.path(),
            cfg_of("run.name = r1\ngan.stages = 2\n"),
        )
        .unwrap();
        assert_eq!(ctx2.cfg.seed().unwrap(), 7); // inherited from frozen
        assert_eq!(ctx2.cfg.get_usize("gan.stages").unwrap(), 2);
        assert_eq!(std::fs::read_to_string(&frozen).unwrap(), first);
    }

    #[test]
    fn open_rejects_path_like_run_names() {
        let tmp = TempDir::new().unwrap();
        assert!(RunContext::open_at(tmp.path(), cfg_of("run.name = a/b\n")).is_err());
    }

    #[test]
    fn missing_artifact_error_names_path_and_hint() {
        let tmp = TempDir::new().unwrap();
        let ctx = RunContext::open_at(tmp.path(), cfg_of("run.name = r\n")).unwrap();
        let err = ctx
            .expect_artifact("gan/discriminator.ckpt", "run `cipher train-gan` first")
            .unwrap_err()
            .to_string();
        assert!(err.contains("gan/discriminator.ckpt") || err.contains("disc.ckpt"), "{err}");
        assert!(err.contains("train-gan"), "{err}");
    }

    #[test]
    fn prepare_builds_manifests_and_reruns_identically() {
        let tmp = TempDir::new().unwrap();
        let ctx = RunContext::open_at(
            tmp.path(),
            cfg_of(
                "run.name = prep\ndata.real_dir = @synth\ndata.n_per_class = 8\ndata.resolution = 8\n",
            ),
        )
        .unwrap();
        cmd_prepare(&ctx).unwrap();
        let manifest = ctx.dir.join("data").join("real.tsv");
        let first = std::fs::read_to_string(&manifest).unwrap();
        assert_eq!(first.lines().count(), 8);
        // Paths are run-relative so the manifest is relocatable.
        assert!(first.lines().all(|l| l.starts_with("@run/")), "{first}");

        cmd_prepare(&ctx).unwrap();
        assert_eq!(std::fs::read_to_string(&manifest).unwrap(), first);

        // With a fake dir (reusing the synth corpus) a balanced manifest
        // appears too.
        let ctx2 = RunContext::open_at(
            tmp.path(),
            cfg_of("run.name = prep\ndata.fake_dir = @run/data/synth_real\n"),
        )
        .unwrap();
        cmd_prepare(&ctx2).unwrap();
        let balanced = std::fs::read_to_string(ctx2.dir.join("data").join("balanced.tsv")).unwrap();
        assert_eq!(balanced.lines().count(), 16);
    }

    #[test]
    fn prepare_with_deficit_names_the_shortfall() {
        let tmp = TempDir::new().unwrap();
        let real = tmp.path().join("real");
        synth::generate_corpus(&real, 3, 8, 1).unwrap();
        let ctx = RunContext::open_at(
            tmp.path(),
            cfg_of(&format!(
                "run.name = d\ndata.real_dir = {}\ndata.n_per_class = 10\n",
                real.display()
            )),
        )
        .unwrap();
        let err = cmd_prepare(&ctx).unwrap_err().to_string();
        assert!(err.contains("10") && err.contains('3'), "{err}");
    }

    /// Micro end-to-end: every command in order on a tiny config. Keeps the
    /// full pipeline honest without the cost of the desk-scale run.
    #[test]
    fn micro_pipeline_runs_every_command() {
        let tmp = TempDir::new().unwrap();
        let text = "run.name = micro\n\
                    seed = 42\n\
                    data.real_dir = @synth\n\
                    data.n_per_class = 12\n\
                    data.resolution = 8\n\
                    gan.stages = 2\n\
                    gan.channels = 16\n\
                    gan.latent_dim = 16\n\
                    gan.iters_per_stage = 12\n\
                    gan.fade_iters = 4\n\
                    gan.batch_size = 4\n\
                    gan.gd_ratio = 1\n\
                    diff.T = 20\n\
                    diff.iterations = 10\n\
                    diff.batch_size = 4\n\
                    diff.base_channels = 8\n\
                    diff.multipliers = 1,2\n\
                    ddim.steps = 5\n\
                    gen.count = 12\n\
                    ft.epochs = 1\n\
                    ft.batch_size = 4\n";
        let ctx = RunContext::open_at(tmp.path(), cfg_of(text)).unwrap();

        run_command::<f32>("prepare", &ctx, &[]).unwrap();
        run_command::<f32>("train-gan", &ctx, &[]).unwrap();
        run_command::<f32>("train-diffusion", &ctx, &[]).unwrap();
        run_command::<f32>("generate", &ctx, &[]).unwrap();
        assert!(ctx.dir.join("fakes").join("fake_00011.png").exists());
        let gen_manifest =
            std::fs::read_to_string(ctx.dir.join("fakes").join("generation.txt")).unwrap();
        assert!(gen_manifest.contains("checkpoint_sha256 = "), "{gen_manifest}");
        assert!(gen_manifest.contains("steps = 5"), "{gen_manifest}");
        assert!(gen_manifest.contains("seed = 0"), "{gen_manifest}");

        // Build the balanced manifest from the run's own fakes.
        let ctx2 = RunContext::open_at(
            tmp.path(),
            cfg_of("run.name = micro\ndata.fake_dir = @run/fakes\n"),
        )
        .unwrap();
        run_command::<f32>("prepare", &ctx2, &[]).unwrap();
        run_command::<f32>("finetune", &ctx2, &[]).unwrap();

        // Detect prints one line per image: path, probability, decision.
        let real_img = ctx.dir.join("data/synth_real/synth_00000.png");
        let mut out = Vec::new();
        cmd_detect::<f32>(&ctx2, &[real_img.display().to_string()], &mut out).unwrap();
        let line = String::from_utf8(out).unwrap();
        let fields: Vec<&str> = line.trim().split('\t').collect();
        assert_eq!(fields.len(), 3, "{line}");
        let p: f64 = fields[1].parse().unwrap();
        assert!((0.0..=1.0).contains(&p), "{line}");
        assert!(fields[2] == "real" || fields[2] == "fake", "{line}");

        run_command::<f32>("evaluate", &ctx2, &[]).unwrap();
        let reports: Vec<_> = std::fs::read_dir(ctx.dir.join("reports/cipher-disc"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        assert!(
            reports.iter().any(|p| p.extension().is_some_and(|e| e == "csv")),
            "no csv report in {reports:?}"
        );
        assert!(
            reports.iter().any(|p| p.extension().is_some_and(|e| e == "md")),
            "no md report in {reports:?}"
        );

        // The event log recorded every command.
        let events = std::fs::read_to_string(ctx.dir.join("events.log")).unwrap();
        for cmd in ["prepare", "train-gan", "train-diffusion", "generate", "finetune", "evaluate"] {
            assert!(events.contains(&format!("{cmd} done")), "missing `{cmd} done` in log");
        }
    }

    #[test]
    fn unknown_command_is_an_error() {
        let tmp = TempDir::new().unwrap();
        let ctx = RunContext::open_at(tmp.path(), cfg_of("run.name = u\n")).unwrap();
        let err = run_command::<f32>("trane-gan", &ctx, &[]).unwrap_err().to_string();
        assert!(err.contains("trane-gan"), "{err}");
    }
}
