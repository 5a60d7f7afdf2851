//! Run configuration: a flat `key = value` text file, command-line
//! overrides layered on top, and a canonical serialization that gets frozen
//! into each run directory.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{CipherError, Result};

/// Every accepted key with its default (`None` = no default; the key must be
/// set before a command that needs it). Unknown keys are rejected up front so
/// a typo can't silently fall back to a default.
pub const KNOWN_KEYS: &[(&str, Option<&str>)] = &[
    ("seed", Some("42")),
    ("precision", Some("f32")),
    ("run.name", Some("default")),
    // Data preparation.
    ("data.real_dir", None),
    ("data.fake_dir", None),
    ("data.resolution", Some("64")),
    ("data.batch_size", Some("64")),
    ("data.n_per_class", None),
    ("data.seed", None), // defaults to the global seed
    ("data.train_frac", Some("0.7")),
    ("data.val_frac", Some("0.15")),
    ("data.test_frac", Some("0.15")),
    ("augment.hflip_prob", Some("0.5")),
    ("augment.jitter", Some("0.2")),
    // Progressive GAN training.
    ("gan.stages", Some("5")),
    ("gan.channels", Some("512")),
    ("gan.latent_dim", Some("256")),
    ("gan.iters_per_stage", Some("50000")),
    ("gan.fade_iters", Some("10000")),
    ("gan.lr", Some("0.001")),
    ("gan.batch_size", Some("16")),
    ("gan.gd_ratio", Some("2")),
    ("gan.ckpt_every", Some("0")),
    // Diffusion training.
    ("diff.T", Some("1000")),
    ("diff.beta_start", Some("0.0001")),
    ("diff.beta_end", Some("0.02")),
    ("diff.iterations", Some("100000")),
    ("diff.lr", Some("0.0002")),
    ("diff.base_channels", Some("64")),
    ("diff.multipliers", Some("1,2,4")),
    ("diff.batch_size", Some("32")),
    ("diff.ckpt_every", Some("0")),
    // DDIM sampling / fake generation.
    ("ddim.steps", Some("100")),
    ("ddim.seed", Some("0")),
    ("gen.count", Some("500")),
    // Detector fine-tuning and scoring.
    ("ft.epochs", Some("50")),
    ("ft.lr", Some("0.0001")),
    ("ft.batch_size", Some("64")),
    ("ft.label_smoothing", Some("0.1")),
    ("ft.dropout", Some("0.2")),
    ("ft.freeze_backbone", Some("false")),
    ("detect.threshold", Some("0.5")),
    ("detect.checkpoints", None),
    ("ensemble.weights", None),
    // Evaluation.
    ("eval.registry", None),
];

/// Short command-line spellings for common keys, so
/// `prepare --real DIR --fake DIR --n 100` works as documented.
const ALIASES: &[(&str, &str)] = &[
    ("real", "data.real_dir"),
    ("fake", "data.fake_dir"),
    ("n", "data.n_per_class"),
    ("run", "run.name"),
    ("threshold", "detect.threshold"),
    ("registry", "eval.registry"),
];

fn canonical_key(key: &str) -> &str {
    ALIASES
        .iter()
        .find(|(a, _)| *a == key)
        .map(|(_, k)| *k)
        .unwrap_or(key)
}

fn known(key: &str) -> bool {
    KNOWN_KEYS.iter().any(|(k, _)| *k == key)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Flat configuration map. Later layers (file, then command line) shadow
/// earlier ones; defaults fill the gaps at read time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    /// Parse `key = value` lines. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str, origin: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CipherError::Config(format!(
                    "{origin} line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                ))
            })?;
            cfg.set_checked(key.trim(), value.trim(), &format!("{origin} line {}", lineno + 1))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| CipherError::io(path, e))?;
        Config::parse(&text, &path.display().to_string())
    }

    /// Set one key, resolving aliases and rejecting unknown names.
    pub fn set_checked(&mut self, key: &str, value: &str, origin: &str) -> Result<()> {
        let key = canonical_key(key);
        if !known(key) {
            return Err(CipherError::Config(format!(
                "{origin}: unknown config key '{key}'"
            )));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Overlay `other` on top of `self` (other wins).
    pub fn merge(&mut self, other: &Config) {
        for (k, v) in &other.values {
            self.values.insert(k.clone(), v.clone());
        }
    }

    /// Raw value: explicit setting first, then the built-in default.
    pub fn get(&self, key: &str) -> Option<&str> {
        if let Some(v) = self.values.get(key) {
            return Some(v);
        }
        KNOWN_KEYS
            .iter()
            .find(|(k, _)| *k == key)
            .and_then(|(_, d)| *d)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| {
            CipherError::Config(format!(
                "config key '{key}' is required but not set (pass --{key} VALUE or add it to the config file)"
            ))
        })
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, v: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        v.parse::<T>().map_err(|e| {
            CipherError::Config(format!("config key '{key}': cannot parse {v:?}: {e}"))
        })
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.parsed(key, self.require(key)?)
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.parsed(key, self.require(key)?)
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.parsed(key, self.require(key)?)
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.require(key)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(CipherError::Config(format!(
                "config key '{key}': expected true/false, got {other:?}"
            ))),
        }
    }

    /// Comma-separated list of numbers, e.g. `diff.multipliers = 1,2,4`.
    pub fn get_list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.require(key)?
            .split(',')
            .map(|s| self.parsed(key, s.trim()))
            .collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.get_u64("seed")
    }

    /// Seed for manifest building; falls back to the global seed.
    pub fn data_seed(&self) -> Result<u64> {
        match self.values.get("data.seed") {
            Some(v) => self.parsed("data.seed", v),
            None => self.seed(),
        }
    }

    pub fn precision(&self) -> Result<Precision> {
        match self.require("precision")? {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(CipherError::Config(format!(
                "precision must be f32 or f64, got {other:?}"
            ))),
        }
    }

    /// Canonical text: every key that has a value (set or default), sorted.
    /// This is what gets frozen into `config.resolved`.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        let mut keys: Vec<&str> = KNOWN_KEYS.iter().map(|(k, _)| *k).collect();
        keys.sort_unstable();
        for key in keys {
            if let Some(v) = self.get(key) {
                out.push_str(key);
                out.push_str(" = ");
                out.push_str(v);
                out.push('\n');
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_file_text_with_comments_and_blanks() {
        let cfg = Config::parse(
            "# a preset\n\nseed = 7\ngan.stages = 2\n  diff.T =  200 \n",
            "test",
        )
        .unwrap();
        assert_eq!(cfg.seed().unwrap(), 7);
        assert_eq!(cfg.get_usize("gan.stages").unwrap(), 2);
        assert_eq!(cfg.get_usize("diff.T").unwrap(), 200);
    }

    #[test]
    fn defaults_fill_unset_keys() {
        let cfg = Config::default();
        assert_eq!(cfg.seed().unwrap(), 42);
        assert_eq!(cfg.precision().unwrap(), Precision::F32);
        assert_eq!(cfg.get_f64("detect.threshold").unwrap(), 0.5);
        assert_eq!(cfg.get_list::<usize>("diff.multipliers").unwrap(), vec![1, 2, 4]);
        assert!(cfg.get("data.real_dir").is_none());
        assert!(cfg.require("data.real_dir").is_err());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(Config::parse("gan.stgaes = 2\n", "test").is_err());
        assert!(Config::parse("seed 42\n", "test").is_err());
        let cfg = Config::parse("seed = banana\n", "test").unwrap();
        let err = cfg.seed().unwrap_err().to_string();
        assert!(err.contains("seed"), "{err}");
        assert!(err.contains("banana"), "{err}");
    }

    #[test]
    fn aliases_map_to_canonical_keys() {
        let mut cfg = Config::default();
        cfg.set_checked("real", "/data/faces", "cli").unwrap();
        cfg.set_checked("n", "100", "cli").unwrap();
        cfg.set_checked("run", "exp1", "cli").unwrap();
        assert_eq!(cfg.get("data.real_dir"), Some("/data/faces"));
        assert_eq!(cfg.get_usize("data.n_per_class").unwrap(), 100);
        assert_eq!(cfg.get("run.name"), Some("exp1"));
    }

    #[test]
    fn overrides_shadow_file_values() {
        let mut base = Config::parse("seed = 7\ngan.lr = 0.01\n", "file").unwrap();
        let mut cli = Config::default();
        cli.set_checked("seed", "9", "cli").unwrap();
        base.merge(&cli);
        assert_eq!(base.seed().unwrap(), 9);
        assert_eq!(base.get_f64("gan.lr").unwrap(), 0.01);
    }

    #[test]
    fn resolved_text_is_canonical_and_reparses_identically() {
        let mut cfg = Config::parse("seed = 9\ndiff.T = 200\n", "file").unwrap();
        cfg.set_checked("real", "/r", "cli").unwrap();
        let text = cfg.resolved_text();
        // Sorted keys, one per line, defaults included.
        assert!(text.contains("seed = 9\n"));
        assert!(text.contains("diff.T = 200\n"));
        assert!(text.contains("data.real_dir = /r\n"));
        assert!(text.contains("precision = f32\n"));

        let reparsed = Config::parse(&text, "frozen").unwrap();
        assert_eq!(reparsed.resolved_text(), text);
    }

    #[test]
    fn data_seed_falls_back_to_global() {
        let cfg = Config::parse("seed = 11\n", "t").unwrap();
        assert_eq!(cfg.data_seed().unwrap(), 11);
        let cfg = Config::parse("seed = 11\ndata.seed = 3\n", "t").unwrap();
        assert_eq!(cfg.data_seed().unwrap(), 3);
    }
}
