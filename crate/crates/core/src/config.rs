//! Flat `key = value` experiment configuration.
//!
//! Every key has a default; files and `--set` overrides only name what they
//! change. Unknown keys and unparsable values are errors.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig};
use crate::optim::DEFAULT_LR;

/// What `batch_size` counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BatchUnit {
    /// Uniformly sampled (view, pixel) pairs.
    #[default]
    Pixels,
    /// Whole training images.
    Images,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-period cosine from `lr` to zero over the run.
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub batch_unit: BatchUnit,
    pub epochs: usize,
    /// Optimizer steps per epoch; 0 means one pass over the training pixels.
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub scale: usize,
    pub model: ModelConfig,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f32,
    pub schedule: Schedule,
    pub deterministic: bool,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    /// Write an intermediate checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            batch_size: 1024,
            batch_unit: BatchUnit::Pixels,
            epochs: 200,
            steps_per_epoch: 0,
            seed: 0,
            scale: 2,
            model: ModelConfig::default(),
            grad_clip: 0.0,
            schedule: Schedule::Constant,
            deterministic: false,
            threads: 0,
            checkpoint_every: 0,
        }
    }
}

/// Recognized keys, in the order they are written.
pub const KEYS: [&str; 18] = [
    "lr",
    "batch_size",
    "batch_unit",
    "epochs",
    "steps_per_epoch",
    "seed",
    "scale",
    "levels",
    "n_base",
    "table_size",
    "features",
    "raw_weights",
    "ablation",
    "grad_clip",
    "schedule",
    "deterministic",
    "threads",
    "checkpoint_every",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config(format!("cannot parse `{value}` for key `{key}`")))
}

impl TrainConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "batch_unit" => {
                self.batch_unit = match v {
                    "pixels" => BatchUnit::Pixels,
                    "images" => BatchUnit::Images,
                    _ => return Err(Error::Config(format!("batch_unit must be pixels or images, got `{v}`"))),
                }
            }
            "epochs" => self.epochs = parse(key, v)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "scale" => self.scale = parse(key, v)?,
            "levels" => self.model.levels = parse(key, v)?,
            "n_base" => self.model.n_base = parse(key, v)?,
            "table_size" => self.model.table_size = parse(key, v)?,
            "features" => self.model.features = parse(key, v)?,
            "raw_weights" => self.model.raw_weights = parse(key, v)?,
            "ablation" => self.model.ablation = v.parse::<Ablation>()?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "schedule" => {
                self.schedule = match v {
                    "constant" => Schedule::Constant,
                    "cosine" => Schedule::Cosine,
                    _ => return Err(Error::Config(format!("schedule must be constant or cosine, got `{v}`"))),
                }
            }
            "deterministic" => self.deterministic = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key `{other}` (known keys: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
        self.set(k, v)
    }

    /// Parses config text on top of the defaults. `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Every key with its current value, one per line, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut out = String::new();
        let unit = match self.batch_unit {
            BatchUnit::Pixels => "pixels",
            BatchUnit::Images => "images",
        };
        let schedule = match self.schedule {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        };
        let values: [String; 18] = [
            self.lr.to_string(),
            self.batch_size.to_string(),
            unit.into(),
            self.epochs.to_string(),
            self.steps_per_epoch.to_string(),
            self.seed.to_string(),
            self.scale.to_string(),
            m.levels.to_string(),
            m.n_base.to_string(),
            m.table_size.to_string(),
            m.features.to_string(),
            m.raw_weights.to_string(),
            m.ablation.to_string(),
            self.grad_clip.to_string(),
            schedule.into(),
            self.deterministic.to_string(),
            self.threads.to_string(),
            self.checkpoint_every.to_string(),
        ];
        for (k, v) in KEYS.iter().zip(values) {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("scale", self.scale),
            ("levels", self.model.levels),
            ("features", self.model.features),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("`lr` must be positive, got {}", self.lr)));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::Config(format!("`grad_clip` must be non-negative, got {}", self.grad_clip)));
        }
        if self.model.n_base < 2 {
            return Err(Error::Config(format!("`n_base` must be at least 2, got {}", self.model.n_base)));
        }
        if !self.model.table_size.is_power_of_two() {
            return Err(Error::Config(format!("`table_size` must be a power of two, got {}", self.model.table_size)));
        }
        crate::hashfield::level_specs(self.model.levels, self.model.n_base)?;
        Ok(())
    }
}
