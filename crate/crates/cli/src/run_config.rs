//! Run configuration: model keys plus the seed, dtype, paths and command
//! settings, read from `key = value` text.

use std::path::PathBuf;

use comer_core::config::parse_pairs;
use comer_core::train::TrainConfig;
use comer_core::{CoMerConfig, DType, Error, Result};

/// Keys accepted besides the model keys, with their defaults.
pub const RUN_KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("dtype", "f32 for shapes, training and export; verification always f64"),
    ("out", "out"),
    ("checkpoint", "<out>/toy.vcmr"),
    ("image", "toy"),
    ("steps", "500"),
    ("lr", "0.05"),
    ("momentum", "0.9"),
    ("batch_size", "10"),
    ("images", "50"),
    ("threshold", "0.05"),
    ("eps", "1e-4"),
    ("tol", "1e-4"),
    ("samples", "24"),
    ("oracle_seeds", "20"),
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: CoMerConfig,
    pub seed: u64,
    pub dtype: Option<DType>,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub image: String,
    pub train: TrainConfig,
    pub threshold: f64,
    pub eps: f64,
    pub tol: f64,
    pub samples: usize,
    pub oracle_seeds: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: CoMerConfig::toy(),
            seed: 0,
            dtype: None,
            out: PathBuf::from("out"),
            checkpoint: None,
            image: "toy".into(),
            train: TrainConfig::default(),
            threshold: 0.05,
            eps: 1e-4,
            tol: 1e-4,
            samples: 24,
            oracle_seeds: 20,
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

impl RunConfig {
    /// Applies one key; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? {
            return Ok(());
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "dtype" => self.dtype = Some(value.parse()?),
            "out" => self.out = value.into(),
            "checkpoint" => self.checkpoint = Some(value.into()),
            "image" => self.image = value.into(),
            "steps" => self.train.steps = parse(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "momentum" => self.train.momentum = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "images" => self.train.images = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "tol" => self.tol = parse(key, value)?,
            "samples" => self.samples = parse(key, value)?,
            "oracle_seeds" => self.oracle_seeds = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `pairs` with `variant` first, so the other keys refine the
    /// preset regardless of order.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let (first, rest): (Vec<_>, Vec<_>) = pairs.iter().partition(|(k, _)| k == "variant");
        for (k, v) in first.into_iter().chain(rest) {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(&parse_pairs(text)?)?;
        Ok(cfg)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("toy.vcmr"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_and_run_keys() {
        let cfg = RunConfig::from_text("steps = 7\n# note\ndepth = 8\nvariant = toy\nseed = 3\n").unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.model.vit.depth, 8);
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let e = RunConfig::from_text("colour = blue\n").unwrap_err().to_string();
        assert!(e.contains("unknown key `colour`"), "{e}");
    }

    #[test]
    fn every_documented_key_is_accepted() {
        let mut cfg = RunConfig::default();
        let samples = [
            ("seed", "1"),
            ("dtype", "f64"),
            ("out", "x"),
            ("checkpoint", "x.vcmr"),
            ("image", "checker"),
            ("steps", "1"),
            ("lr", "0.1"),
            ("momentum", "0.5"),
            ("batch_size", "2"),
            ("images", "3"),
            ("threshold", "0.5"),
            ("eps", "1e-5"),
            ("tol", "1e-3"),
            ("samples", "4"),
            ("oracle_seeds", "2"),
        ];
        assert_eq!(samples.len(), RUN_KEYS.len());
        for (k, v) in samples {
            cfg.set(k, v).unwrap();
        }
    }
}
