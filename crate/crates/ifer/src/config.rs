//! Run configuration: desk-scale defaults, a flat key=value file format and
//! field-by-field overrides for CLI flags.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{IferError, Result};
use crate::losses::LossWeights;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Momentum weight a_m of the discriminator EMA.
    pub momentum: f64,
    pub weights: LossWeights,
    /// Rendered dataset sizes per split.
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Seed for dataset sampling, independent of the training seed.
    pub data_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 100,
            batch_size: 8,
            lr: 1e-4,
            momentum: 0.999,
            weights: LossWeights::default(),
            train_size: 256,
            val_size: 64,
            test_size: 64,
            data_seed: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(IferError::Config("batch_size must be >= 1".into()));
        }
        if self.weights.alignment > 0.0 && self.batch_size < 3 {
            return Err(IferError::Config(format!(
                "alignment loss needs batch_size >= 3 (pairwise distributions), got {}",
                self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(IferError::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(IferError::Config(format!("learning rate {} invalid", self.lr)));
        }
        Ok(())
    }

    /// Apply one `key=value` assignment; unknown keys are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| {
                IferError::Config(format!("cannot parse value '{v}' for key '{key}'"))
            })
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "w_pixel" => self.weights.pixel = parse(key, value)?,
            "w_perceptual" => self.weights.perceptual = parse(key, value)?,
            "w_consistency" => self.weights.consistency = parse(key, value)?,
            "w_latent" => self.weights.latent_reg = parse(key, value)?,
            "w_adversarial" => self.weights.adversarial = parse(key, value)?,
            "w_alignment" => self.weights.alignment = parse(key, value)?,
            "train_size" => self.train_size = parse(key, value)?,
            "val_size" => self.val_size = parse(key, value)?,
            "test_size" => self.test_size = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            other => {
                return Err(IferError::Config(format!(
                    "unknown configuration key '{other}'"
                )))
            }
        }
        Ok(())
    }

    /// Parse a flat `key=value` file; `#` starts a comment, blank lines are
    /// ignored.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                IferError::Config(format!(
                    "{}:{}: expected key=value, got '{line}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// All keys with their current values, for `--dump-config` style output.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("seed".into(), self.seed.to_string());
        m.insert("iterations".into(), self.iterations.to_string());
        m.insert("batch_size".into(), self.batch_size.to_string());
        m.insert("lr".into(), self.lr.to_string());
        m.insert("momentum".into(), self.momentum.to_string());
        m.insert("w_pixel".into(), self.weights.pixel.to_string());
        m.insert("w_perceptual".into(), self.weights.perceptual.to_string());
        m.insert("w_consistency".into(), self.weights.consistency.to_string());
        m.insert("w_latent".into(), self.weights.latent_reg.to_string());
        m.insert("w_adversarial".into(), self.weights.adversarial.to_string());
        m.insert("w_alignment".into(), self.weights.alignment.to_string());
        m.insert("train_size".into(), self.train_size.to_string());
        m.insert("val_size".into(), self.val_size.to_string());
        m.insert("test_size".into(), self.test_size.to_string());
        m.insert("data_seed".into(), self.data_seed.to_string());
        m
    }
}
