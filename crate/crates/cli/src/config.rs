//! Resolved run settings: a flat `key = value` file overlaid by command-line flags.

use std::fmt::Write as _;

use anyhow::{anyhow, bail, Context, Result};
use aseg::data::SplitMode;
use aseg::networks::{DiscriminatorSpec, GeneratorSpec};
use aseg::objectives::AdamConfig;
use aseg::train::{ModelKind, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub seed: u64,
    pub image_size: usize,
    pub base_width: usize,
    /// `None` picks `min(8, log2(image_size))`.
    pub depth: Option<usize>,
    pub dropout: f32,
    pub disc_base_width: usize,
    pub disc_layers: usize,
    pub shuffle: bool,
    /// `None` trains on every entry not reserved for testing.
    pub train_count: Option<usize>,
    /// `None` tests on every entry not used for training.
    pub test_count: Option<usize>,
    /// `None` keeps the sorted order (fixed prefix); `Some` shuffles with this seed first.
    pub split_seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gen = GeneratorSpec::default();
        let disc = DiscriminatorSpec::default();
        let adam = AdamConfig::default();
        Self {
            model: ModelKind::Pix2Pix,
            epochs: 100,
            batch_size: 1,
            lambda: aseg::objectives::DEFAULT_LAMBDA,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            seed: 0,
            image_size: gen.image_size,
            base_width: gen.base_width,
            depth: None,
            dropout: gen.dropout_p,
            disc_base_width: disc.base_width,
            disc_layers: disc.n_layers,
            shuffle: true,
            train_count: None,
            test_count: None,
            split_seed: None,
        }
    }
}

/// Every recognised key, in echo order.
pub const KEYS: &[&str] = &[
    "model",
    "epochs",
    "batch_size",
    "lambda",
    "lr",
    "beta1",
    "beta2",
    "seed",
    "image_size",
    "base_width",
    "depth",
    "dropout",
    "disc_base_width",
    "disc_layers",
    "shuffle",
    "train_count",
    "test_count",
    "split_seed",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| anyhow!("{key}: cannot parse {value:?}"))
}

fn optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value {
        "auto" | "none" => Ok(None),
        v => num(key, v).map(Some),
    }
}

fn switch(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        v => bail!("{key}: expected on or off, got {v:?}"),
    }
}

fn show<T: ToString>(v: &Option<T>, absent: &str) -> String {
    v.as_ref().map_or_else(|| absent.to_string(), |v| v.to_string())
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "model" => self.model = value.parse()?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            "base_width" => self.base_width = num(key, value)?,
            "depth" => self.depth = optional(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "disc_base_width" => self.disc_base_width = num(key, value)?,
            "disc_layers" => self.disc_layers = num(key, value)?,
            "shuffle" => self.shuffle = switch(key, value)?,
            "train_count" => self.train_count = optional(key, value)?,
            "test_count" => self.test_count = optional(key, value)?,
            "split_seed" => self.split_seed = optional(key, value)?,
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| anyhow!("config line {}: expected key = value", n + 1))?;
            self.set(key.trim(), value).with_context(|| format!("config line {}", n + 1))?;
        }
        Ok(())
    }

    /// Defaults, then `file` (if any), then `overrides` in order.
    pub fn resolve(file: Option<&str>, overrides: &[(&str, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(text) = file {
            cfg.apply_text(text)?;
        }
        for (key, value) in overrides {
            cfg.set(key, value).with_context(|| format!("--{}", key.replace('_', "-")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn depth(&self) -> usize {
        self.depth.unwrap_or_else(|| (self.image_size.max(1).ilog2() as usize).min(8))
    }

    pub fn split_mode(&self) -> SplitMode {
        self.split_seed.map_or(SplitMode::FixedPrefix, SplitMode::Seeded)
    }

    pub fn validate(&self) -> Result<()> {
        let range = |ok: bool, msg: String| if ok { Ok(()) } else { Err(anyhow!(msg)) };
        range(self.epochs >= 1, format!("epochs must be >= 1, got {}", self.epochs))?;
        range(self.batch_size >= 1, format!("batch_size must be >= 1, got {}", self.batch_size))?;
        range(
            self.lambda.is_finite() && self.lambda >= 0.0,
            format!("lambda must be finite and >= 0, got {}", self.lambda),
        )?;
        range(self.lr.is_finite() && self.lr > 0.0, format!("lr must be > 0, got {}", self.lr))?;
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            range((0.0..1.0).contains(&b), format!("{k} must lie in [0, 1), got {b}"))?;
        }
        range(self.image_size >= 16, format!("image_size must be >= 16, got {}", self.image_size))?;
        range((0.0..1.0).contains(&self.dropout), format!("dropout must lie in [0, 1), got {}", self.dropout))?;
        self.train_config().validate()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lambda: self.lambda,
            generator: GeneratorSpec {
                in_channels: 1,
                out_channels: 1,
                base_width: self.base_width,
                depth: self.depth(),
                dropout_p: if self.model == ModelKind::Pix2Pix { self.dropout } else { 0.0 },
                image_size: self.image_size,
            },
            discriminator: DiscriminatorSpec {
                in_channels: 2,
                base_width: self.disc_base_width,
                n_layers: self.disc_layers,
            },
            adam: AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() },
            seed: self.seed,
            shuffle: self.shuffle,
        }
    }

    /// Every key in [`KEYS`] order, readable back with [`apply_text`](Self::apply_text).
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let value = match *key {
                "model" => self.model.to_string(),
                "epochs" => self.epochs.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "lambda" => self.lambda.to_string(),
                "lr" => self.lr.to_string(),
                "beta1" => self.beta1.to_string(),
                "beta2" => self.beta2.to_string(),
                "seed" => self.seed.to_string(),
                "image_size" => self.image_size.to_string(),
                "base_width" => self.base_width.to_string(),
                "depth" => show(&self.depth, "auto"),
                "dropout" => self.dropout.to_string(),
                "disc_base_width" => self.disc_base_width.to_string(),
                "disc_layers" => self.disc_layers.to_string(),
                "shuffle" => if self.shuffle { "on" } else { "off" }.to_string(),
                "train_count" => show(&self.train_count, "auto"),
                "test_count" => show(&self.test_count, "auto"),
                "split_seed" => show(&self.split_seed, "none"),
                _ => unreachable!("key list and echo disagree"),
            };
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }
}
