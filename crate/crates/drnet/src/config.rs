//! Flat `key = value` run configuration with dot-namespaced keys.
//!
//! ```text
//! # comment
//! model.variant = drnet
//! train.lr0 = 0.01
//! loss.alpha = 0.75
//! ```

use std::fmt::Write as _;

use drnet_core::evaluation::NoiseProtocol;
use drnet_core::geometry::Convention;
use drnet_core::losses::{GapNorm, GapSpace, LossWeights};
use drnet_core::models::{AdInput, ModelVariant};
use drnet_core::noise::NoiseMode;
use drnet_core::training::TrainConfig;
use thiserror::Error;

use crate::dataset::SideFilter;

/// Every accepted key, in the order the effective config is written.
pub const KEYS: &[&str] = &[
    "model.variant",
    "model.height",
    "model.width",
    "model.channels",
    "model.feature_dim",
    "model.diff_hidden",
    "model.ad_hidden",
    "model.fuse_hidden",
    "model.ad_input",
    "loss.alpha",
    "loss.beta",
    "loss.gap_norm",
    "loss.gap_space",
    "train.lr0",
    "train.lr_decay",
    "train.decay_every",
    "train.batch_size",
    "train.epochs",
    "train.seed",
    "train.patience",
    "train.min_delta_deg",
    "train.grad_clip",
    "train.adam_beta1",
    "train.adam_beta2",
    "train.adam_eps",
    "eval.holdout",
    "eval.noise_mode",
    "eval.noise_fraction",
    "eval.batch_size",
    "data.convention",
    "data.side",
];

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{key}`; valid keys: {}", KEYS.join(", "))]
    UnknownKey { key: String },
    #[error("{key}: invalid value {value:?}: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<ConfigError>,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Subjects held out for evaluation by `train`, `sweep` and `ablate`.
    pub holdout: usize,
    pub noise: NoiseProtocol,
    pub eval_batch_size: usize,
    pub convention: Convention,
    pub side: SideFilter,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::new(ModelVariant::Drnet),
            holdout: 2,
            noise: NoiseProtocol::default(),
            eval_batch_size: 64,
            convention: Convention::CameraFacing,
            side: SideFilter::All,
        }
    }
}

fn gap_norm_name(n: GapNorm) -> &'static str {
    match n {
        GapNorm::L1 => "l1",
        GapNorm::L2 => "l2",
    }
}

fn gap_space_name(s: GapSpace) -> &'static str {
    match s {
        GapSpace::Vector => "vector",
        GapSpace::Angles => "angles",
    }
}

impl RunConfig {
    /// Parses a config file body over the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| ConfigError::AtLine {
                line: i + 1,
                source: Box::new(e),
            })?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: kv.to_string(),
        })?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |reason: &str| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            reason: reason.to_string(),
        };
        let uint = || {
            value
                .parse::<usize>()
                .map_err(|_| bad("expected a non-negative integer"))
        };
        let real = || {
            value
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad("expected a finite number"))
        };
        let t = &mut self.train;
        let m = &mut t.model;
        match key {
            "model.variant" => {
                m.variant = ModelVariant::parse(value)
                    .ok_or_else(|| bad("expected drnet, two_stream, diff_nn, no_ad, no_sc or no_diff"))?
            }
            "model.height" => m.backbone.height = uint()?,
            "model.width" => m.backbone.width = uint()?,
            "model.channels" => {
                m.backbone.channels = value
                    .split(',')
                    .map(|c| c.trim().parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| bad("expected a comma-separated list of integers"))?
            }
            "model.feature_dim" => m.backbone.feature_dim = uint()?,
            "model.diff_hidden" => m.diff_hidden = uint()?,
            "model.ad_hidden" => m.ad_hidden = uint()?,
            "model.fuse_hidden" => m.fuse_hidden = uint()?,
            "model.ad_input" => {
                m.ad_input = AdInput::parse(value).ok_or_else(|| bad("expected diff_vector or diff_hidden"))?
            }
            "loss.alpha" => t.weights = LossWeights::new(real()?, t.weights.beta()).map_err(|e| bad(&e.to_string()))?,
            "loss.beta" => t.weights = LossWeights::new(t.weights.alpha(), real()?).map_err(|e| bad(&e.to_string()))?,
            "loss.gap_norm" => {
                t.gap.norm = match value {
                    "l1" => GapNorm::L1,
                    "l2" => GapNorm::L2,
                    _ => return Err(bad("expected l1 or l2")),
                }
            }
            "loss.gap_space" => {
                t.gap.space = match value {
                    "vector" => GapSpace::Vector,
                    "angles" => GapSpace::Angles,
                    _ => return Err(bad("expected vector or angles")),
                }
            }
            "train.lr0" => t.lr0 = real()?,
            "train.lr_decay" => t.lr_decay = real()?,
            "train.decay_every" => t.decay_every = uint()?,
            "train.batch_size" => t.batch_size = uint()?,
            "train.epochs" => t.epochs = uint()?,
            "train.seed" => {
                t.seed = value
                    .parse::<u64>()
                    .map_err(|_| bad("expected a non-negative integer"))?
            }
            "train.patience" => t.patience = uint()?,
            "train.min_delta_deg" => t.min_delta_deg = real()?,
            "train.grad_clip" => t.grad_clip = if value == "none" { None } else { Some(real()?) },
            "train.adam_beta1" => t.adam.beta1 = real()?,
            "train.adam_beta2" => t.adam.beta2 = real()?,
            "train.adam_eps" => t.adam.eps = real()?,
            "eval.holdout" => self.holdout = uint()?,
            "eval.noise_mode" => {
                self.noise.mode = NoiseMode::parse(value).ok_or_else(|| bad("expected blank, occlude_half or blink"))?
            }
            "eval.noise_fraction" => self.noise.fraction = real()?,
            "eval.batch_size" => self.eval_batch_size = uint()?,
            "data.convention" => {
                self.convention =
                    Convention::parse(value).ok_or_else(|| bad("expected camera_facing or mirrored_yaw"))?
            }
            "data.side" => self.side = SideFilter::parse(value).ok_or_else(|| bad("expected left, right or all"))?,
            _ => return Err(ConfigError::UnknownKey { key: key.to_string() }),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let m = &t.model;
        Some(match key {
            "model.variant" => m.variant.name().to_string(),
            "model.height" => m.backbone.height.to_string(),
            "model.width" => m.backbone.width.to_string(),
            "model.channels" => m
                .backbone
                .channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "model.feature_dim" => m.backbone.feature_dim.to_string(),
            "model.diff_hidden" => m.diff_hidden.to_string(),
            "model.ad_hidden" => m.ad_hidden.to_string(),
            "model.fuse_hidden" => m.fuse_hidden.to_string(),
            "model.ad_input" => m.ad_input.name().to_string(),
            "loss.alpha" => t.weights.alpha().to_string(),
            "loss.beta" => t.weights.beta().to_string(),
            "loss.gap_norm" => gap_norm_name(t.gap.norm).to_string(),
            "loss.gap_space" => gap_space_name(t.gap.space).to_string(),
            "train.lr0" => t.lr0.to_string(),
            "train.lr_decay" => t.lr_decay.to_string(),
            "train.decay_every" => t.decay_every.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.patience" => t.patience.to_string(),
            "train.min_delta_deg" => t.min_delta_deg.to_string(),
            "train.grad_clip" => t.grad_clip.map_or("none".to_string(), |v| v.to_string()),
            "train.adam_beta1" => t.adam.beta1.to_string(),
            "train.adam_beta2" => t.adam.beta2.to_string(),
            "train.adam_eps" => t.adam.eps.to_string(),
            "eval.holdout" => self.holdout.to_string(),
            "eval.noise_mode" => self.noise.mode.name().to_string(),
            "eval.noise_fraction" => self.noise.fraction.to_string(),
            "eval.batch_size" => self.eval_batch_size.to_string(),
            "data.convention" => self.convention.name().to_string(),
            "data.side" => self.side.name().to_string(),
            _ => return None,
        })
    }

    /// The full effective configuration, one `key = value` line per key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("every listed key has a value"));
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let b = &self.train.model.backbone;
        if b.channels.is_empty() || b.channels.contains(&0) || b.feature_dim == 0 {
            return Err(ConfigError::Invalid(
                "model.channels and model.feature_dim must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.noise.fraction) {
            return Err(ConfigError::Invalid("eval.noise_fraction must lie in [0, 1]".into()));
        }
        if self.eval_batch_size == 0 {
            return Err(ConfigError::Invalid("eval.batch_size must be at least 1".into()));
        }
        Ok(())
    }
}
