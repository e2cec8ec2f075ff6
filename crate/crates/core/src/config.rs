//! Flat TOML run configuration.
//!
//! Every key is optional and defaults to the value shown by
//! `RunConfig::default()`; unknown keys are rejected. Optimizer, loss and
//! augmentation defaults follow the original training protocol: SGD with
//! momentum 0.9, learning rate 0.002, weight decay 1e-8, batch 20, λ = 0.1,
//! ±10° rotations and random flips.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentPolicy, PrepareConfig, BACKGROUND_THRESHOLD};
use crate::error::{Error, Result};
use crate::nn::{ModelConfig, Placement};
use crate::optim::SgdConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::InvalidConfig(vec![format!(
                "precision must be f32 or f64, got {s:?}"
            )])),
        }
    }
}

/// Learning-rate schedule. Only a constant rate is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub cache_dir: PathBuf,
    pub out_dir: PathBuf,

    // data
    pub classes: usize,
    pub image_size: usize,
    pub background_threshold: f64,
    pub balanced_test: bool,
    pub synthetic_train_per_class: usize,
    pub synthetic_test_per_class: usize,
    /// Side length of rendered synthetic images before cropping.
    pub synthetic_render_size: usize,

    // model
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub blocks_per_stage: usize,
    pub attention_channels: Vec<usize>,
    pub placement: Placement,
    pub reduction: usize,
    pub feature_dim: usize,
    pub freeze_backbone: bool,

    // loss
    pub lambda: f64,
    pub center_alpha: f64,

    // optimizer
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,

    // augmentation
    pub max_rotation_deg: f64,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let sgd = SgdConfig::default();
        let train = TrainConfig::default();
        let aug = AugmentPolicy::default();
        let prep = PrepareConfig::default();
        RunConfig {
            seed: 0,
            precision: Precision::F32,
            cache_dir: PathBuf::from("cache"),
            out_dir: PathBuf::from("run"),
            classes: model.classes,
            image_size: prep.image_size,
            background_threshold: BACKGROUND_THRESHOLD,
            balanced_test: prep.balanced_test,
            synthetic_train_per_class: 200,
            synthetic_test_per_class: 50,
            synthetic_render_size: 72,
            stage_channels: model.stage_channels,
            stage_strides: model.stage_strides,
            blocks_per_stage: model.blocks_per_stage,
            attention_channels: model.attention_channels,
            placement: model.placement,
            reduction: model.reduction,
            feature_dim: model.feature_dim,
            freeze_backbone: model.freeze_backbone,
            lambda: train.lambda,
            center_alpha: train.center_alpha,
            lr: sgd.lr,
            lr_schedule: LrSchedule::Constant,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            batch_size: sgd.batch_size,
            epochs: train.epochs,
            max_rotation_deg: aug.max_rotation_deg,
            hflip_prob: aug.hflip_prob,
            vflip_prob: aug.vflip_prob,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(vec![e.message().to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidConfig(v) => {
                Error::InvalidConfig(v.into_iter().map(|m| format!("{}: {m}", path.display())).collect())
            }
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the effective configuration as `config.toml` in `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            stage_channels: self.stage_channels.clone(),
            stage_strides: self.stage_strides.clone(),
            blocks_per_stage: self.blocks_per_stage,
            attention_channels: self.attention_channels.clone(),
            placement: self.placement,
            reduction: self.reduction,
            feature_dim: self.feature_dim,
            classes: self.classes,
            freeze_backbone: self.freeze_backbone,
        }
    }

    pub fn prepare(&self) -> PrepareConfig {
        PrepareConfig {
            image_size: self.image_size,
            classes: self.classes,
            background_threshold: self.background_threshold,
            balanced_test: self.balanced_test,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            sgd: SgdConfig {
                lr: self.lr,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
                batch_size: self.batch_size,
            },
            lambda: self.lambda,
            center_alpha: self.center_alpha,
            augment: AugmentPolicy {
                max_rotation_deg: self.max_rotation_deg,
                hflip_prob: self.hflip_prob,
                vflip_prob: self.vflip_prob,
            },
            seed: self.seed,
        }
    }

    /// Checks every section and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for r in [self.model().validate(), self.train().validate()] {
            match r {
                Err(Error::InvalidConfig(e)) => errs.extend(e),
                Err(other) => errs.push(other.to_string()),
                Ok(()) => {}
            }
        }
        if self.image_size == 0 {
            errs.push("image_size must be positive".into());
        } else if self.model().output_size(self.image_size).pow(2) < 2 {
            errs.push(format!(
                "image_size {} leaves a 1×1 backbone output; pooling needs more than one cell",
                self.image_size
            ));
        }
        if !(0.0..255.0).contains(&self.background_threshold) {
            errs.push(format!(
                "background_threshold must lie in [0, 255), got {}",
                self.background_threshold
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_protocol() {
        let c = RunConfig::default();
        assert_eq!((c.lr, c.momentum, c.weight_decay, c.batch_size), (0.002, 0.9, 1e-8, 20));
        assert_eq!((c.lambda, c.reduction, c.classes), (0.1, 4, 5));
        assert_eq!(c.max_rotation_deg, 10.0);
        assert_eq!(c.placement, Placement::Sea);
        c.validate().unwrap();
    }

    #[test]
    fn empty_file_means_defaults_and_echo_round_trips() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
        let c = RunConfig {
            lambda: 0.0,
            placement: Placement::AtSe,
            stage_channels: vec![8, 16],
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml("learning_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn validation_reports_all_problems() {
        let c = RunConfig {
            lr: -1.0,
            reduction: 3,
            hflip_prob: 2.0,
            ..RunConfig::default()
        };
        match c.validate() {
            Err(Error::InvalidConfig(e)) => assert!(e.len() >= 3, "{e:?}"),
            other => panic!("{other:?}"),
        }
    }
}
