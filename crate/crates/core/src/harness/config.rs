//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored; lists are comma-separated.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::Predictor;
use crate::math::Temperature;
use crate::tuning::{TrainConfig, DEFAULT_TEMPLATE};

use super::task::TaskSpec;
use super::world::WorldConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub n_classes: usize,
    pub dim: usize,
    pub noise_scale: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub embed_width: usize,
    pub feature_dim: usize,
    pub template: String,
    pub misalignment: f64,
    pub modality_gap: f64,
    pub base_shift: f64,
    pub text_common: f64,
    pub text_scale: f64,
    pub shots: usize,
    pub epochs: usize,
    pub lr_init: f64,
    pub warmup_lr: f64,
    pub warmup_epochs: usize,
    pub batch_size: Option<usize>,
    pub tau: Temperature,
    pub stage1_tau: Option<Temperature>,
    pub predictors: Vec<Predictor>,
    pub alpha_cache: bool,
}

impl Default for RunConfig {
    /// The standard synthetic task.
    fn default() -> Self {
        let world = WorldConfig::default();
        Self {
            seed: 7,
            n_classes: 8,
            dim: 16,
            noise_scale: 0.35,
            train_per_class: 64,
            test_per_class: 100,
            embed_width: world.embed_width,
            feature_dim: world.feature_dim,
            template: DEFAULT_TEMPLATE.to_string(),
            misalignment: world.misalignment,
            modality_gap: world.modality_gap,
            base_shift: world.base_shift,
            text_common: world.text_common,
            text_scale: world.text_scale,
            shots: 16,
            epochs: 200,
            lr_init: 0.02,
            warmup_lr: 1e-5,
            warmup_epochs: 1,
            batch_size: None,
            tau: Temperature::DEFAULT,
            stage1_tau: None,
            predictors: vec![
                Predictor::Dynamic,
                Predictor::FixedAlpha(0.5),
                Predictor::ClassifierCombo,
                Predictor::LearnedOnly,
                Predictor::HandcraftedOnly,
            ],
            alpha_cache: false,
        }
    }
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::ConfigLine { line, message: format!("invalid value {value:?} for {key}") })
}

fn parse_tau(line: usize, key: &str, value: &str) -> Result<Temperature> {
    Temperature::new(parse_value(line, key, value)?)
        .map_err(|e| Error::ConfigLine { line, message: e.to_string() })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split_once('#').map_or(raw, |(c, _)| c).trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::ConfigLine { line, message: format!("expected `key = value`, got {content:?}") })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "seed" => cfg.seed = parse_value(line, key, value)?,
                "n_classes" => cfg.n_classes = parse_value(line, key, value)?,
                "dim" => cfg.dim = parse_value(line, key, value)?,
                "noise_scale" => cfg.noise_scale = parse_value(line, key, value)?,
                "train_per_class" => cfg.train_per_class = parse_value(line, key, value)?,
                "test_per_class" => cfg.test_per_class = parse_value(line, key, value)?,
                "embed_width" => cfg.embed_width = parse_value(line, key, value)?,
                "feature_dim" => cfg.feature_dim = parse_value(line, key, value)?,
                "template" => cfg.template = value.to_string(),
                "misalignment" => cfg.misalignment = parse_value(line, key, value)?,
                "modality_gap" => cfg.modality_gap = parse_value(line, key, value)?,
                "base_shift" => cfg.base_shift = parse_value(line, key, value)?,
                "text_common" => cfg.text_common = parse_value(line, key, value)?,
                "text_scale" => cfg.text_scale = parse_value(line, key, value)?,
                "shots" => cfg.shots = parse_value(line, key, value)?,
                "epochs" => cfg.epochs = parse_value(line, key, value)?,
                "lr_init" => cfg.lr_init = parse_value(line, key, value)?,
                "warmup_lr" => cfg.warmup_lr = parse_value(line, key, value)?,
                "warmup_epochs" => cfg.warmup_epochs = parse_value(line, key, value)?,
                "batch_size" => {
                    cfg.batch_size = if value == "full" { None } else { Some(parse_value(line, key, value)?) }
                }
                "tau" => cfg.tau = parse_tau(line, key, value)?,
                "stage1_tau" => {
                    cfg.stage1_tau = if value == "same" { None } else { Some(parse_tau(line, key, value)?) }
                }
                "predictors" => {
                    cfg.predictors = value
                        .split(',')
                        .map(|p| Predictor::parse(p).map_err(|e| Error::ConfigLine { line, message: e.to_string() }))
                        .collect::<Result<_>>()?
                }
                "alpha_cache" => cfg.alpha_cache = parse_value(line, key, value)?,
                _ => return Err(Error::ConfigLine { line, message: format!("unknown key {key:?}") }),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.predictors.is_empty() {
            return Err(Error::Config("no predictors requested".into()));
        }
        if self.shots > self.train_per_class {
            return Err(Error::Config(format!(
                "{} shots requested but only {} training samples per class",
                self.shots, self.train_per_class
            )));
        }
        if !(self.misalignment >= 0.0 && self.modality_gap >= 0.0 && self.base_shift >= 0.0 && self.text_common >= 0.0 && self.text_scale > 0.0) {
            return Err(Error::Config("world offsets must be non-negative and text_scale positive".into()));
        }
        Ok(())
    }

    pub fn stage1_tau(&self) -> Temperature {
        self.stage1_tau.unwrap_or(self.tau)
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            n_classes: self.n_classes,
            dim: self.dim,
            noise_scale: self.noise_scale,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            seed: self.seed,
        }
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            embed_width: self.embed_width,
            feature_dim: self.feature_dim,
            template: self.template.clone(),
            seed: self.seed,
            misalignment: self.misalignment,
            modality_gap: self.modality_gap,
            base_shift: self.base_shift,
            text_common: self.text_common,
            text_scale: self.text_scale,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr_init: self.lr_init,
            warmup_lr: self.warmup_lr,
            warmup_epochs: self.warmup_epochs,
            max_epochs: self.epochs,
            shots: self.shots,
            seed: self.seed,
            tau: self.tau,
            batch_size: self.batch_size,
            template: self.template.clone(),
        }
    }

    /// Serializes to text that [`RunConfig::parse`] reads back unchanged.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("n_classes", self.n_classes.to_string());
        kv("dim", self.dim.to_string());
        kv("noise_scale", self.noise_scale.to_string());
        kv("train_per_class", self.train_per_class.to_string());
        kv("test_per_class", self.test_per_class.to_string());
        kv("embed_width", self.embed_width.to_string());
        kv("feature_dim", self.feature_dim.to_string());
        kv("template", self.template.clone());
        kv("misalignment", self.misalignment.to_string());
        kv("modality_gap", self.modality_gap.to_string());
        kv("base_shift", self.base_shift.to_string());
        kv("text_common", self.text_common.to_string());
        kv("text_scale", self.text_scale.to_string());
        kv("shots", self.shots.to_string());
        kv("epochs", self.epochs.to_string());
        kv("lr_init", self.lr_init.to_string());
        kv("warmup_lr", self.warmup_lr.to_string());
        kv("warmup_epochs", self.warmup_epochs.to_string());
        kv("batch_size", self.batch_size.map_or_else(|| "full".into(), |b| b.to_string()));
        kv("tau", self.tau.value().to_string());
        kv("stage1_tau", self.stage1_tau.map_or_else(|| "same".into(), |t| t.value().to_string()));
        kv("predictors", self.predictors.iter().map(Predictor::name).collect::<Vec<_>>().join(", "));
        kv("alpha_cache", self.alpha_cache.to_string());
        s
    }
}
