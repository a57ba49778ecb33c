use std::collections::BTreeMap;
use std::path::Path;

use crate::datagen::{PerturbConfig, RetrainConfig, UnsharpParams};
use crate::error::{Error, Result};
use crate::model::{join, parse_list, parse_value, ModelConfig};

use super::TrainConfig;

/// Everything a run needs besides its data, in the flat key=value form used
/// by config files, command-line overrides and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Training samples kept per class, first in file order; 0 keeps all.
    pub samples_per_class: usize,
    /// Class count when it differs from the dataset family's.
    pub classes: Option<usize>,
    pub retrain_epochs: usize,
    pub retrain_lr: f64,
    pub unsharp: UnsharpParams,
    pub ranks: Vec<usize>,
    pub per_class: usize,
    pub random_scale: bool,
    /// Architecture keys laid over the full-size defaults.
    pub model: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let retrain = RetrainConfig::default();
        let perturb = PerturbConfig::default();
        Self {
            train: TrainConfig::default(),
            samples_per_class: 200,
            classes: None,
            retrain_epochs: retrain.epochs,
            retrain_lr: retrain.learning_rate,
            unsharp: UnsharpParams::default(),
            ranks: perturb.ranks,
            per_class: perturb.per_class,
            random_scale: perturb.random_scale,
            model: BTreeMap::new(),
        }
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{}`", n + 1, k.trim())));
        }
    }
    Ok(map)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "epochs" => t.epochs = parse_value(key, value)?,
            "cycle_length" => t.cycle_length = parse_value(key, value)?,
            "lr_max" => t.lr_max = parse_value(key, value)?,
            "lr_min" => t.lr_min = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "recon_weight" => t.recon_weight = parse_value(key, value)?,
            "beta1" => t.beta1 = parse_value(key, value)?,
            "beta2" => t.beta2 = parse_value(key, value)?,
            "epsilon" => t.epsilon = parse_value(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,
            "precision" => t.precision = value.trim().parse()?,
            "ensemble" => t.ensemble = value.trim().parse()?,
            "samples_per_class" => self.samples_per_class = parse_value(key, value)?,
            "classes" => self.classes = Some(parse_value(key, value)?),
            "retrain_epochs" => self.retrain_epochs = parse_value(key, value)?,
            "retrain_lr" => self.retrain_lr = parse_value(key, value)?,
            "unsharp_radius" => self.unsharp.radius = parse_value(key, value)?,
            "unsharp_threshold" => self.unsharp.threshold = parse_value(key, value)?,
            "unsharp_repeats" => self.unsharp.repeats = parse_value(key, value)?,
            "unsharp_amount" => self.unsharp.amount = parse_value(key, value)?,
            "ranks" => self.ranks = parse_list(key, value)?,
            "per_class" => self.per_class = parse_value(key, value)?,
            "random_scale" => self.random_scale = parse_value(key, value)?,
            k if ModelConfig::KEYS.contains(&k) => {
                self.model.insert(k.to_string(), value.trim().to_string());
            }
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Defaults overridden by every entry of `map`.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_map(&parse_key_values(&std::fs::read_to_string(path)?)?)
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let t = &self.train;
        let mut m = self.model.clone();
        for (k, v) in [
            ("epochs", t.epochs.to_string()),
            ("cycle_length", t.cycle_length.to_string()),
            ("lr_max", t.lr_max.to_string()),
            ("lr_min", t.lr_min.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("recon_weight", t.recon_weight.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("epsilon", t.epsilon.to_string()),
            ("seed", t.seed.to_string()),
            ("precision", t.precision.as_str().to_string()),
            ("ensemble", t.ensemble.to_string()),
            ("samples_per_class", self.samples_per_class.to_string()),
            ("retrain_epochs", self.retrain_epochs.to_string()),
            ("retrain_lr", self.retrain_lr.to_string()),
            ("unsharp_radius", self.unsharp.radius.to_string()),
            ("unsharp_threshold", self.unsharp.threshold.to_string()),
            ("unsharp_repeats", self.unsharp.repeats.to_string()),
            ("unsharp_amount", self.unsharp.amount.to_string()),
            ("ranks", join(&self.ranks)),
            ("per_class", self.per_class.to_string()),
            ("random_scale", self.random_scale.to_string()),
        ] {
            m.insert(k.to_string(), v);
        }
        if let Some(c) = self.classes {
            m.insert("classes".into(), c.to_string());
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.ranks.is_empty() || self.per_class == 0 {
            return Err(Error::Config("perturbation needs at least one rank and per_class >= 1".into()));
        }
        if !(self.retrain_lr > 0.0) {
            return Err(Error::Config(format!("retrain_lr must be positive, got {}", self.retrain_lr)));
        }
        Ok(())
    }

    /// The architecture for `classes` classes with the configured overrides.
    pub fn model_config(&self, classes: usize) -> Result<ModelConfig> {
        let mut map = self.model.clone();
        map.insert("classes".into(), classes.to_string());
        ModelConfig::from_map(&map)
    }

    pub fn retrain_config(&self) -> RetrainConfig {
        RetrainConfig {
            epochs: self.retrain_epochs,
            learning_rate: self.retrain_lr,
            batch_size: self.train.batch_size,
            seed: self.train.seed,
        }
    }

    pub fn perturb_config(&self) -> PerturbConfig {
        PerturbConfig {
            ranks: self.ranks.clone(),
            per_class: self.per_class,
            seed: self.train.seed,
            random_scale: self.random_scale,
            batch_size: self.train.batch_size,
        }
    }
}
