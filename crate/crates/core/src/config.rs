//! Experiment configuration: a flat TOML document with task-specific
//! defaults, `AFFECT_`-prefixed environment overrides and typed validation.
//!
//! Every key is optional except `task`. Keys not listed on
//! [`ExperimentConfig`] are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::Task;

pub const ENV_PREFIX: &str = "AFFECT_";

/// How expression class 7 ("other") is handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExprScheme {
    /// Class 7 is trained as an ordinary eighth class.
    SevenAsClass,
    /// Class 7 is dropped from training and assigned at prediction time when
    /// the top probability falls below `other_threshold`.
    SevenByThreshold,
}

/// Treatment of AU frames carrying −1 entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuPolicy {
    /// Drop any frame with at least one unannotated AU.
    DropFrame,
    /// Keep partially annotated frames and mask the unannotated cells out of the loss.
    MaskCells,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Fusion of the three AU pipeline outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Mean,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,
    /// Square frame side in pixels; frames are RGB.
    pub image_size: usize,

    /// Conv widths per backbone variant; each entry adds a conv + 2×2 pool stage.
    pub backbone_channels: Vec<Vec<usize>>,
    /// Output feature dimension per backbone variant.
    pub backbone_feature_dims: Vec<usize>,
    pub n_backbones: usize,
    /// Hidden width of the VA regressor MLPs.
    pub head_hidden: usize,
    /// Whether stage-2 VA training also updates the backbones.
    pub va_finetune_backbones: bool,

    pub lambda_dice: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,

    pub expr_scheme: ExprScheme,
    pub other_threshold: f64,
    pub n_subclassifiers: usize,
    pub bootstrap_fraction: f64,
    pub bootstrap_use_all: bool,

    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Stage-1 (polarity) epochs for VA.
    pub polarity_epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,

    pub sequence_length: usize,
    pub resample_up: usize,
    pub resample_down: usize,
    pub transformer_layers: usize,
    pub transformer_heads: usize,
    pub transformer_ff_mult: usize,
    pub positional_encoding: bool,
    pub fusion: FusionMode,
    pub au_threshold: f64,
    pub au_policy: AuPolicy,

    pub augment: bool,
    pub rotation_degrees: f64,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub hflip_prob: f64,
    pub jitter_brightness: f64,
    pub jitter_contrast: f64,
    pub jitter_saturation: f64,
    pub jitter_hue: f64,

    /// Use generated data instead of `data_root`.
    pub synthetic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_root: Option<String>,
    pub synth_train_videos: usize,
    pub synth_val_videos: usize,
    pub synth_frames_per_video: usize,
    /// Fraction of VA labels set exactly to ±1 in generated data.
    pub synth_extreme_fraction: f64,
}

impl ExperimentConfig {
    /// Documented defaults for a task.
    pub fn defaults(task: Task) -> Self {
        let mut cfg = Self {
            task,
            seed: 0,
            image_size: 112,
            backbone_channels: vec![vec![8, 16, 32], vec![12, 24, 32], vec![16, 32, 32]],
            backbone_feature_dims: vec![32, 32, 32],
            n_backbones: 3,
            head_hidden: 32,
            va_finetune_backbones: false,
            lambda_dice: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            expr_scheme: ExprScheme::SevenAsClass,
            other_threshold: 0.5,
            n_subclassifiers: 5,
            bootstrap_fraction: 1.0,
            bootstrap_use_all: true,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-4,
            epochs: 20,
            polarity_epochs: 10,
            batch_size: 32,
            dropout: 0.0,
            sequence_length: 256,
            resample_up: 2,
            resample_down: 2,
            transformer_layers: 2,
            transformer_heads: 4,
            transformer_ff_mult: 4,
            positional_encoding: true,
            fusion: FusionMode::Mean,
            au_threshold: 0.5,
            au_policy: AuPolicy::DropFrame,
            augment: false,
            rotation_degrees: 15.0,
            crop_scale_min: 0.8,
            crop_scale_max: 1.0,
            hflip_prob: 0.5,
            jitter_brightness: 0.2,
            jitter_contrast: 0.2,
            jitter_saturation: 0.2,
            jitter_hue: 0.05,
            synthetic: true,
            data_root: None,
            synth_train_videos: 4,
            synth_val_videos: 2,
            synth_frames_per_video: 50,
            synth_extreme_fraction: 0.15,
        };
        match task {
            Task::Va => {}
            Task::Expr => {
                cfg.backbone_channels = vec![
                    vec![8, 16],
                    vec![16, 32, 32],
                    vec![8, 8, 16],
                    vec![12, 24],
                    vec![16, 16, 32],
                ];
                cfg.backbone_feature_dims = vec![32, 48, 24, 32, 48];
                cfg.n_backbones = 5;
                cfg.learning_rate = 5e-4;
                cfg.augment = true;
            }
            Task::Au => {
                cfg.backbone_channels = vec![vec![16, 32, 32]];
                cfg.backbone_feature_dims = vec![64];
                cfg.n_backbones = 1;
                cfg.optimizer = OptimizerKind::Sgd;
                cfg.learning_rate = 0.7;
                cfg.epochs = 24;
                cfg.batch_size = 16;
                cfg.dropout = 0.3;
            }
        }
        cfg
    }

    /// Parses TOML text, applying defaults for the declared task and then the
    /// given overrides (already-parsed key/value pairs).
    pub fn from_toml_str(text: &str, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
        for (k, v) in overrides {
            table.insert(k.clone(), v.clone());
        }
        let task = match table.get("task") {
            Some(toml::Value::String(s)) => s.parse::<Task>()?,
            Some(_) => return Err(Error::config("task", "must be a string")),
            None => return Err(Error::config("task", "missing required key")),
        };
        let mut merged = toml::Table::try_from(Self::defaults(task))
            .map_err(|e| Error::config("<defaults>", e.to_string()))?;
        for (k, v) in table {
            if !merged.contains_key(&k) && k != "data_root" {
                return Err(Error::config(k, "unknown key"));
            }
            merged.insert(k, v);
        }
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(error_key(&e), e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    /// Returns a copy with one key replaced, re-validated.
    pub fn with_value(&self, key: &str, value: toml::Value) -> Result<Self> {
        let table = toml::Table::try_from(self).map_err(|e| Error::config(key, e.to_string()))?;
        if !table.contains_key(key) && key != "data_root" {
            return Err(Error::config(key, "unknown key"));
        }
        let text = toml::to_string(&table).map_err(|e| Error::config(key, e.to_string()))?;
        Self::from_toml_str(&text, &[(key.to_string(), value)])
    }

    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, key: &str, reason: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::config(key, reason))
            }
        }
        check(self.image_size >= 4, "image_size", "must be at least 4")?;
        check(self.n_backbones >= 1, "n_backbones", "must be at least 1")?;
        check(
            self.backbone_channels.len() == self.backbone_feature_dims.len(),
            "backbone_feature_dims",
            "needs one entry per backbone_channels entry",
        )?;
        check(
            self.backbone_channels.len() >= self.n_backbones,
            "backbone_channels",
            "fewer variants than n_backbones",
        )?;
        for (i, widths) in self.backbone_channels.iter().enumerate() {
            check(!widths.is_empty(), "backbone_channels", "empty variant")?;
            check(widths.iter().all(|&w| w > 0), "backbone_channels", "zero width")?;
            check(
                self.image_size >> widths.len() >= 1,
                "backbone_channels",
                &format!("variant {i} pools the image below one pixel"),
            )?;
        }
        check(
            self.backbone_feature_dims.iter().all(|&d| d > 0),
            "backbone_feature_dims",
            "must be positive",
        )?;
        if self.task == Task::Va {
            check(self.n_backbones == 3, "n_backbones", "VA fuses exactly 3 backbones")?;
        }
        check(self.head_hidden > 0, "head_hidden", "must be positive")?;
        check(
            self.lambda_dice >= 0.0 && self.lambda_dice.is_finite(),
            "lambda_dice",
            "must be a finite value >= 0",
        )?;
        check(
            self.focal_alpha > 0.0 && self.focal_alpha <= 1.0,
            "focal_alpha",
            "must lie in (0, 1]",
        )?;
        check(
            self.focal_gamma >= 0.0 && self.focal_gamma.is_finite(),
            "focal_gamma",
            "must be a finite value >= 0",
        )?;
        check(
            self.other_threshold > 0.0 && self.other_threshold < 1.0,
            "other_threshold",
            "must lie in (0, 1)",
        )?;
        check(self.n_subclassifiers >= 1, "n_subclassifiers", "must be at least 1")?;
        check(
            self.bootstrap_fraction > 0.0 && self.bootstrap_fraction <= 1.0,
            "bootstrap_fraction",
            "must lie in (0, 1]",
        )?;
        check(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning_rate",
            "must be positive",
        )?;
        check(self.batch_size >= 1, "batch_size", "must be at least 1")?;
        if self.task == Task::Va {
            check(self.batch_size >= 2, "batch_size", "CCC batches need at least 2 frames")?;
        }
        check(
            (0.0..1.0).contains(&self.dropout),
            "dropout",
            "must lie in [0, 1)",
        )?;
        check(self.sequence_length >= 1, "sequence_length", "must be at least 1")?;
        check(
            self.resample_up >= 1 && self.resample_down >= 1,
            "resample_up",
            "factors must be at least 1",
        )?;
        check(
            (self.sequence_length * self.resample_up).div_ceil(self.resample_down)
                == self.sequence_length,
            "resample_down",
            "up/down round trip must preserve the sequence length",
        )?;
        check(self.transformer_layers >= 1, "transformer_layers", "must be at least 1")?;
        check(self.transformer_heads >= 1, "transformer_heads", "must be at least 1")?;
        check(self.transformer_ff_mult >= 1, "transformer_ff_mult", "must be at least 1")?;
        if self.task == Task::Au {
            check(
                self.backbone_feature_dims[0].is_multiple_of(self.transformer_heads),
                "transformer_heads",
                "model dimension must be divisible by the head count",
            )?;
        }
        check(
            self.au_threshold > 0.0 && self.au_threshold < 1.0,
            "au_threshold",
            "must lie in (0, 1)",
        )?;
        check(self.rotation_degrees >= 0.0, "rotation_degrees", "must be >= 0")?;
        check(
            self.crop_scale_min > 0.0
                && self.crop_scale_min <= self.crop_scale_max
                && self.crop_scale_max <= 1.0,
            "crop_scale_min",
            "need 0 < min <= max <= 1",
        )?;
        check(
            (0.0..=1.0).contains(&self.hflip_prob),
            "hflip_prob",
            "must lie in [0, 1]",
        )?;
        for (key, v) in [
            ("jitter_brightness", self.jitter_brightness),
            ("jitter_contrast", self.jitter_contrast),
            ("jitter_saturation", self.jitter_saturation),
            ("jitter_hue", self.jitter_hue),
        ] {
            check(v >= 0.0 && v.is_finite(), key, "must be >= 0")?;
        }
        check(
            self.synthetic || self.data_root.is_some(),
            "data_root",
            "required when synthetic = false",
        )?;
        check(
            self.synth_train_videos >= 1 && self.synth_frames_per_video >= 1,
            "synth_train_videos",
            "generated splits need at least one video and frame",
        )?;
        check(
            (0.0..=1.0).contains(&self.synth_extreme_fraction),
            "synth_extreme_fraction",
            "must lie in [0, 1]",
        )?;
        Ok(())
    }
}

fn error_key(e: &toml::de::Error) -> String {
    // toml reports e.g. "invalid type: ..., expected ..." with the offending key in
    // the message; fall back to the whole document.
    let msg = e.message();
    msg.split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<file>".to_string())
}

/// Collects `AFFECT_<KEY>` variables into typed override pairs.
pub fn env_overrides() -> Vec<(String, toml::Value)> {
    let mut out: Vec<(String, toml::Value)> = std::env::vars()
        .filter_map(|(k, v)| {
            let key = k.strip_prefix(ENV_PREFIX)?.to_ascii_lowercase();
            Some((key, parse_value(&v)))
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Interprets a command-line or environment string as a TOML value, falling
/// back to a plain string.
pub fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Reads a config file, applying environment overrides.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml_str(&text, &env_overrides())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg = ExperimentConfig::from_toml_str("task = \"VA\"", &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::defaults(Task::Va));
        assert_eq!(cfg.n_backbones, 3);
        assert_eq!(cfg.learning_rate, 1e-4);
    }

    #[test]
    fn negative_gamma_is_rejected() {
        let err = ExperimentConfig::from_toml_str("task = \"au\"\nfocal_gamma = -1.0", &[]).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "focal_gamma"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_str("task = \"au\"\nwarp_speed = 9", &[]).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "warp_speed"));
    }

    #[test]
    fn missing_task_is_rejected() {
        assert!(ExperimentConfig::from_toml_str("seed = 1", &[]).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let mut cfg = ExperimentConfig::defaults(Task::Expr);
        cfg.seed = 17;
        cfg.other_threshold = 0.35;
        cfg.data_root = Some("/data/affwild".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        cfg.save(&path).unwrap();
        let back = ExperimentConfig::from_toml_str(&std::fs::read_to_string(&path).unwrap(), &[]).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn overrides_win_over_file() {
        let cfg = ExperimentConfig::from_toml_str(
            "task = \"va\"\nseed = 3",
            &[("seed".into(), parse_value("9"))],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn with_value_replaces_one_key() {
        let cfg = ExperimentConfig::defaults(Task::Expr);
        let next = cfg.with_value("lambda_dice", parse_value("0.0")).unwrap();
        assert_eq!(next.lambda_dice, 0.0);
        assert!(cfg.with_value("nope", parse_value("1")).is_err());
    }

    #[test]
    fn resample_round_trip_must_preserve_length() {
        let err = ExperimentConfig::from_toml_str("task = \"au\"\nresample_up = 3", &[]).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "resample_down"));
    }
}
