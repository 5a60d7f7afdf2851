//! Labeled datasets: balanced real/fake builder, tab-separated manifests,
//! and the deterministic epoch batch loader.
//!
//! Manifest paths that live under the run directory are stored with a
//! leading `@run/` token so two runs with different names produce identical
//! manifest bytes.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;

use crate::error::{CipherError, Result};
use crate::nn::rng::{seeded_rng, seeded_stream_rng};
use crate::nn::scalar::Scalar;

use super::raster;

pub const LABEL_REAL: u8 = 0;
pub const LABEL_FAKE: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct Item {
    /// Manifest-form path (may start with `@run/`).
    pub path: String,
    pub label: u8,
    pub split: Split,
}

#[derive(Debug, Clone, Default)]
pub struct LabeledDataset {
    pub items: Vec<Item>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn count_label(&self, label: u8) -> usize {
        self.items.iter().filter(|i| i.label == label).count()
    }

    pub fn indices_for(&self, split: Option<Split>) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, it)| split.is_none_or(|s| it.split == s))
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SplitFracs {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFracs {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        if train < 0.0 || val < 0.0 || test < 0.0 {
            return Err(CipherError::Config(
                "split fractions must be nonnegative".into(),
            ));
        }
        if ((train + val + test) - 1.0).abs() > 1e-9 {
            return Err(CipherError::Config(format!(
                "split fractions must sum to 1, got {}",
                train + val + test
            )));
        }
        Ok(SplitFracs { train, val, test })
    }
}

/// Integer split sizes: floor each share, then hand out the remainder by
/// largest fractional part, ties resolved in train, val, test order.
pub fn split_counts(n: usize, fracs: SplitFracs) -> (usize, usize, usize) {
    let shares = [
        n as f64 * fracs.train,
        n as f64 * fracs.val,
        n as f64 * fracs.test,
    ];
    let mut counts = [0usize; 3];
    let mut rema = [0f64; 3];
    let mut used = 0usize;
    for i in 0..3 {
        counts[i] = shares[i].floor() as usize;
        rema[i] = shares[i] - shares[i].floor();
        used += counts[i];
    }
    let mut order: Vec<usize> = vec![0, 1, 2];
    // stable sort keeps train-before-val-before-test on ties
    order.sort_by(|&a, &b| rema[b].partial_cmp(&rema[a]).unwrap());
    let mut left = n - used;
    for &i in &order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    (counts[0], counts[1], counts[2])
}

/// `@run/`-token handling.
pub fn to_manifest_path(run_dir: Option<&Path>, path: &Path) -> String {
    if let Some(run) = run_dir {
        if let Ok(rel) = path.strip_prefix(run) {
            return format!("@run/{}", rel.to_string_lossy().replace('\\', "/"));
        }
    }
    path.to_string_lossy().into_owned()
}

pub fn resolve_path(run_dir: &Path, manifest_path: &str) -> PathBuf {
    match manifest_path.strip_prefix("@run/") {
        Some(rel) => run_dir.join(rel),
        None => PathBuf::from(manifest_path),
    }
}

const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

/// All image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| CipherError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| CipherError::io(dir, e))?;
        let p = entry.path();
        if !p.is_file() {
            continue;
        }
        let ext = p
            .extension()
            .map(|e| e.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        if IMAGE_EXTS.contains(&ext.as_str()) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug)]
pub struct BuildOutcome {
    pub dataset: LabeledDataset,
    pub warnings: Vec<String>,
}

/// First `n` decodable images of `dir` in sorted order. Undecodable files
/// are skipped and reported in `warnings`.
fn select_usable(
    dir: &Path,
    n: Option<usize>,
    warnings: &mut Vec<String>,
) -> Result<Vec<PathBuf>> {
    let candidates = list_images(dir)?;
    let mut picked = Vec::new();
    for p in candidates {
        if n.is_some_and(|n| picked.len() >= n) {
            break;
        }
        match raster::decode(&p) {
            Ok(_) => picked.push(p),
            Err(e) => warnings.push(format!("skipping unreadable {}: {e}", p.display())),
        }
    }
    Ok(picked)
}

/// Assign splits to `n` items: a seeded shuffle of positions decides which
/// items land in train/val/test; items keep their sorted order in the output.
fn assign_splits(n: usize, fracs: SplitFracs, seed: u64, tag: &str) -> Vec<Split> {
    let (tr, va, _te) = split_counts(n, fracs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(seed, tag);
    order.shuffle(&mut rng);
    let mut splits = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < tr {
            Split::Train
        } else if rank < tr + va {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

fn class_items(
    dir: &Path,
    label: u8,
    n: Option<usize>,
    fracs: SplitFracs,
    seed: u64,
    split_tag: &str,
    run_dir: Option<&Path>,
    warnings: &mut Vec<String>,
) -> Result<Vec<Item>> {
    let picked = select_usable(dir, n, warnings)?;
    if let Some(n) = n {
        if picked.len() < n {
            let class = if label == LABEL_REAL { "real" } else { "fake" };
            return Err(CipherError::InsufficientImages {
                class: class.to_string(),
                need: n,
                have: picked.len(),
            });
        }
    }
    let splits = assign_splits(picked.len(), fracs, seed, split_tag);
    Ok(picked
        .iter()
        .zip(splits)
        .map(|(p, split)| Item {
            path: to_manifest_path(run_dir, p),
            label,
            split,
        })
        .collect())
}

/// Build the balanced fine-tuning dataset: exactly `n_per_class` real and
/// fake images, independently split per class.
pub fn build_balanced_dataset(
    real_dir: &Path,
    fake_dir: &Path,
    n_per_class: usize,
    fracs: SplitFracs,
    seed: u64,
    run_dir: Option<&Path>,
) -> Result<BuildOutcome> {
    let mut warnings = Vec::new();
    if n_per_class == 0 {
        warnings.push("n_per_class is 0: building an empty dataset".to_string());
        return Ok(BuildOutcome {
            dataset: LabeledDataset::default(),
            warnings,
        });
    }
    let mut items = class_items(
        real_dir,
        LABEL_REAL,
        Some(n_per_class),
        fracs,
        seed,
        "split-real",
        run_dir,
        &mut warnings,
    )?;
    items.extend(class_items(
        fake_dir,
        LABEL_FAKE,
        Some(n_per_class),
        fracs,
        seed,
        "split-fake",
        run_dir,
        &mut warnings,
    )?);
    Ok(BuildOutcome {
        dataset: LabeledDataset { items },
        warnings,
    })
}

/// Single-class dataset (all labeled real); used for GAN/diffusion training
/// corpora. `n = None` takes every usable image.
pub fn build_single_class_dataset(
    dir: &Path,
    n: Option<usize>,
    fracs: SplitFracs,
    seed: u64,
    run_dir: Option<&Path>,
) -> Result<BuildOutcome> {
    let mut warnings = Vec::new();
    if n == Some(0) {
        warnings.push("n is 0: building an empty dataset".to_string());
        return Ok(BuildOutcome {
            dataset: LabeledDataset::default(),
            warnings,
        });
    }
    let items = class_items(
        dir,
        LABEL_REAL,
        n,
        fracs,
        seed,
        "split-real",
        run_dir,
        &mut warnings,
    )?;
    Ok(BuildOutcome {
        dataset: LabeledDataset { items },
        warnings,
    })
}

pub fn write_manifest(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for item in &ds.items {
        if item.path.contains('\t') || item.path.contains('\n') {
            return Err(CipherError::Manifest {
                path: path.to_path_buf(),
                msg: format!("path contains tab/newline: {:?}", item.path),
            });
        }
        out.push_str(&format!("{}\t{}\t{}\n", item.path, item.label, item.split));
    }
    std::fs::write(path, out).map_err(|e| CipherError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| CipherError::io(path, e))?;
    let mut items = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let err = |msg: String| CipherError::Manifest {
            path: path.to_path_buf(),
            msg: format!("line {}: {msg}", lineno + 1),
        };
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let label: u8 = match fields[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(err(format!("label must be 0 or 1, got {other:?}"))),
        };
        let split = Split::parse(fields[2])
            .ok_or_else(|| err(format!("unknown split {:?}", fields[2])))?;
        items.push(Item {
            path: fields[0].to_string(),
            label,
            split,
        });
    }
    Ok(LabeledDataset { items })
}

/// Item visit order for one epoch: manifest order, or a seeded permutation
/// that is a pure function of (seed, epoch).
pub fn epoch_order(
    ds: &LabeledDataset,
    split: Option<Split>,
    shuffle: bool,
    seed: u64,
    epoch: u64,
) -> Vec<usize> {
    let mut idx = ds.indices_for(split);
    if shuffle {
        let mut rng = seeded_stream_rng(seed, "batches", epoch);
        idx.shuffle(&mut rng);
    }
    idx
}

#[derive(Debug, Default)]
pub struct EpochReport {
    pub loaded: usize,
    pub skipped: Vec<String>,
}

/// Decodes and preprocesses images at a fixed resolution, caching tensors
/// so later epochs skip the codec entirely.
pub struct DataLoader {
    pub res: usize,
    cache: HashMap<String, Array3<f32>>,
}

impl DataLoader {
    pub fn new(res: usize) -> Self {
        DataLoader {
            res,
            cache: HashMap::new(),
        }
    }

    pub fn load_tensor(&mut self, manifest_path: &str, run_dir: &Path) -> Result<Array3<f32>> {
        if let Some(t) = self.cache.get(manifest_path) {
            return Ok(t.clone());
        }
        let full = resolve_path(run_dir, manifest_path);
        let r = raster::decode(&full)?;
        let t = raster::preprocess(&r, self.res)?;
        self.cache.insert(manifest_path.to_string(), t.clone());
        Ok(t)
    }

    /// Materialize one epoch of batches. Missing or unreadable files are
    /// skipped (logged in the report); every other error aborts.
    pub fn epoch_batches<F: Scalar>(
        &mut self,
        ds: &LabeledDataset,
        split: Option<Split>,
        batch_size: usize,
        shuffle: bool,
        seed: u64,
        epoch: u64,
        run_dir: &Path,
    ) -> Result<(Vec<(Array4<F>, Vec<u8>)>, EpochReport)> {
        assert!(batch_size >= 1, "batch_size must be >= 1");
        let order = epoch_order(ds, split, shuffle, seed, epoch);
        let mut report = EpochReport::default();
        let mut loaded: Vec<(Array3<f32>, u8)> = Vec::with_capacity(order.len());
        for i in order {
            let item = &ds.items[i];
            match self.load_tensor(&item.path, run_dir) {
                Ok(t) => {
                    loaded.push((t, item.label));
                    report.loaded += 1;
                }
                Err(e @ (CipherError::Io { .. } | CipherError::Image { .. })) => {
                    eprintln!("warning: {e}");
                    report.skipped.push(item.path.clone());
                }
                Err(e) => return Err(e),
            }
        }
        let mut batches = Vec::new();
        for chunk in loaded.chunks(batch_size) {
            let n = chunk.len();
            let mut batch = Array4::<F>::zeros((n, 3, self.res, self.res));
            let mut labels = Vec::with_capacity(n);
            for (bi, (t, label)) in chunk.iter().enumerate() {
                for c in 0..3 {
                    for y in 0..self.res {
                        for x in 0..self.res {
                            batch[[bi, c, y, x]] = F::from_f64(t[[c, y, x]] as f64);
                        }
                    }
                }
                labels.push(*label);
            }
            raster::validate_batch(&batch)?;
            batches.push((batch, labels));
        }
        Ok((batches, report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth::generate_corpus;

    fn fracs() -> SplitFracs {
        SplitFracs::new(0.7, 0.15, 0.15).unwrap()
    }

    #[test]
    fn split_counts_examples() {
        assert_eq!(split_counts(10, fracs()), (7, 2, 1)); // 7, 1.5, 1.5: val wins tie
        assert_eq!(split_counts(20, fracs()), (14, 3, 3));
        assert_eq!(split_counts(0, fracs()), (0, 0, 0));
        assert_eq!(
            split_counts(1, SplitFracs::new(0.5, 0.25, 0.25).unwrap()),
            (1, 0, 0)
        );
        assert_eq!(split_counts(250, fracs()), (175, 38, 37));
    }

    #[test]
    fn split_fracs_validation() {
        assert!(SplitFracs::new(0.5, 0.5, 0.5).is_err());
        assert!(SplitFracs::new(-0.1, 0.6, 0.5).is_err());
        assert!(SplitFracs::new(1.0, 0.0, 0.0).is_ok());
    }

    #[test]
    fn balanced_builder_parity_and_manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let real = dir.path().join("real");
        let fake = dir.path().join("fake");
        generate_corpus(&real, 12, 8, 1).unwrap();
        generate_corpus(&fake, 12, 8, 2).unwrap();

        let out = build_balanced_dataset(&real, &fake, 10, fracs(), 42, None).unwrap();
        let ds = &out.dataset;
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.count_label(LABEL_REAL), 10);
        assert_eq!(ds.count_label(LABEL_FAKE), 10);
        // per class: 7/2/1
        for label in [LABEL_REAL, LABEL_FAKE] {
            let count = |s| {
                ds.items
                    .iter()
                    .filter(|i| i.label == label && i.split == s)
                    .count()
            };
            assert_eq!(
                (count(Split::Train), count(Split::Val), count(Split::Test)),
                (7, 2, 1)
            );
        }

        let m1 = dir.path().join("m1.manifest");
        let m2 = dir.path().join("m2.manifest");
        write_manifest(ds, &m1).unwrap();
        let again = build_balanced_dataset(&real, &fake, 10, fracs(), 42, None).unwrap();
        write_manifest(&again.dataset, &m2).unwrap();
        assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());

        let parsed = read_manifest(&m1).unwrap();
        assert_eq!(parsed.len(), 20);
        for (a, b) in parsed.items.iter().zip(ds.items.iter()) {
            assert_eq!(a.path, b.path);
            assert_eq!(a.label, b.label);
            assert_eq!(a.split, b.split);
        }
    }

    #[test]
    fn different_seed_changes_split_assignment() {
        let dir = tempfile::tempdir().unwrap();
        let real = dir.path().join("real");
        let fake = dir.path().join("fake");
        generate_corpus(&real, 10, 8, 1).unwrap();
        generate_corpus(&fake, 10, 8, 2).unwrap();
        let a = build_balanced_dataset(&real, &fake, 10, fracs(), 1, None).unwrap();
        let b = build_balanced_dataset(&real, &fake, 10, fracs(), 2, None).unwrap();
        let splits = |o: &BuildOutcome| {
            o.dataset
                .items
                .iter()
                .map(|i| i.split)
                .collect::<Vec<_>>()
        };
        assert_ne!(splits(&a), splits(&b));
    }

    #[test]
    fn insufficient_images_error_names_class() {
        let dir = tempfile::tempdir().unwrap();
        let real = dir.path().join("real");
        let fake = dir.path().join("fake");
        generate_corpus(&real, 10, 8, 1).unwrap();
        generate_corpus(&fake, 3, 8, 2).unwrap();
        let err = build_balanced_dataset(&real, &fake, 5, fracs(), 1, None).unwrap_err();
        match err {
            CipherError::InsufficientImages { class, need, have } => {
                assert_eq!(class, "fake");
                assert_eq!((need, have), (5, 3));
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn zero_per_class_is_empty_but_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let out =
            build_balanced_dataset(dir.path(), dir.path(), 0, fracs(), 1, None).unwrap();
        assert!(out.dataset.is_empty());
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn corrupt_files_skipped_during_selection() {
        let dir = tempfile::tempdir().unwrap();
        let real = dir.path().join("real");
        generate_corpus(&real, 5, 8, 1).unwrap();
        // plant a corrupt png that sorts first
        std::fs::write(real.join("aaa.png"), b"not a png").unwrap();
        let out = build_single_class_dataset(&real, Some(5), fracs(), 1, None).unwrap();
        assert_eq!(out.dataset.len(), 5);
        assert_eq!(out.warnings.len(), 1);
        assert!(out.warnings[0].contains("aaa.png"));
    }

    #[test]
    fn run_token_roundtrip() {
        let run = Path::new("/tmp/runs/demo");
        let inside = run.join("fakes/img.png");
        let outside = PathBuf::from("/data/real/img.png");
        assert_eq!(to_manifest_path(Some(run), &inside), "@run/fakes/img.png");
        assert_eq!(
            to_manifest_path(Some(run), &outside),
            "/data/real/img.png"
        );
        assert_eq!(resolve_path(run, "@run/fakes/img.png"), inside);
        assert_eq!(resolve_path(run, "/data/real/img.png"), outside);
    }

    #[test]
    fn epoch_batches_partition_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let real = dir.path().join("real");
        generate_corpus(&real, 10, 8, 3).unwrap();
        let ds = build_single_class_dataset(&real, None, fracs(), 1, None)
            .unwrap()
            .dataset;
        assert_eq!(ds.len(), 10);

        let mut loader = DataLoader::new(8);
        let (batches, report) = loader
            .epoch_batches::<f32>(&ds, None, 4, false, 7, 0, dir.path())
            .unwrap();
        assert_eq!(report.loaded, 10);
        assert!(report.skipped.is_empty());
        let sizes: Vec<usize> = batches.iter().map(|(b, _)| b.dim().0).collect();
        assert_eq!(sizes, vec![4, 4, 2]);

        // unshuffled order equals manifest order
        assert_eq!(epoch_order(&ds, None, false, 7, 0), (0..10).collect::<Vec<_>>());
        // same (seed, epoch) -> same permutation; different epoch -> different
        let a = epoch_order(&ds, None, true, 7, 1);
        let b = epoch_order(&ds, None, true, 7, 1);
        let c = epoch_order(&ds, None, true, 7, 2);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn missing_file_skipped_and_reported() {
        let dir = tempfile::tempdir().unwrap();
        let real = dir.path().join("real");
        let paths = generate_corpus(&real, 6, 8, 4).unwrap();
        let ds = build_single_class_dataset(&real, None, fracs(), 1, None)
            .unwrap()
            .dataset;
        std::fs::remove_file(&paths[2]).unwrap();
        let mut loader = DataLoader::new(8);
        let (batches, report) = loader
            .epoch_batches::<f32>(&ds, None, 4, false, 7, 0, dir.path())
            .unwrap();
        assert_eq!(report.loaded, 5);
        assert_eq!(report.skipped.len(), 1);
        assert!(report.skipped[0].contains("synth_00002"));
        assert_eq!(batches.iter().map(|(b, _)| b.dim().0).sum::<usize>(), 5);
    }

    #[test]
    fn split_filter_restricts_items() {
        let dir = tempfile::tempdir().unwrap();
        let real = dir.path().join("real");
        generate_corpus(&real, 10, 8, 5).unwrap();
        let ds = build_single_class_dataset(&real, None, fracs(), 1, None)
            .unwrap()
            .dataset;
        let train = epoch_order(&ds, Some(Split::Train), false, 0, 0);
        let val = epoch_order(&ds, Some(Split::Val), false, 0, 0);
        let test = epoch_order(&ds, Some(Split::Test), false, 0, 0);
        assert_eq!(train.len() + val.len() + test.len(), 10);
        assert_eq!((train.len(), val.len(), test.len()), (7, 2, 1));
        // disjoint
        let mut all: Vec<usize> = train.into_iter().chain(val).chain(test).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 10);
    }
}
