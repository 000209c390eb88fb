//! One TOML document drives every command: data, network, objective,
//! optimizer, generator and run settings.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::backbone::NetworkConfig;
use crate::data::{AugmentationConfig, ToyGenConfig};
use crate::error::{Error, Result};
use crate::ldm::{DdimConfig, DenoiserConfig, ScheduleConfig, VaeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Supervised loss on all decoders plus cross-consistency on unlabeled data.
    Mgcc,
    /// Supervised loss only; unlabeled images are never forwarded.
    Supervised,
}

impl std::str::FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mgcc" => Ok(TrainMode::Mgcc),
            "supervised" | "supervised-only" => Ok(TrainMode::Supervised),
            _ => Err(format!("unknown mode {s:?} (expected mgcc or supervised)")),
        }
    }
}

/// How per-image scores are combined over a validation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    /// Mean of per-image scores.
    Macro,
    /// Scores of the summed confusion counts.
    Micro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory holding images and masks.
    pub root: PathBuf,
    /// Split manifests; `<root>/splits` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub splits_dir: Option<PathBuf>,
    pub split_index: usize,
    pub image_size: usize,
    pub mask_suffix: String,
    pub train_ratio: f64,
    pub repeats: usize,
    pub labeled_fraction: f64,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
    /// Use train ids outside the labeled subset as unlabeled data.
    pub in_domain_unlabeled: bool,
    /// Directory of extra unlabeled images, typically generated ones.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extra_unlabeled_dir: Option<PathBuf>,
    /// Manifest restricting which extra images are used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extra_unlabeled_manifest: Option<PathBuf>,
    /// Cap on the unlabeled pool size, taken in sorted id order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_unlabeled: Option<usize>,
    pub augment: AugmentationConfig,
    pub toy: ToyGenConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            splits_dir: None,
            split_index: 0,
            image_size: 256,
            mask_suffix: "_mask".into(),
            train_ratio: 0.7,
            repeats: 3,
            labeled_fraction: 0.5,
            labeled_per_batch: 4,
            unlabeled_per_batch: 4,
            in_domain_unlabeled: true,
            extra_unlabeled_dir: None,
            extra_unlabeled_manifest: None,
            max_unlabeled: None,
            augment: AugmentationConfig::default(),
            toy: ToyGenConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn splits_dir(&self) -> PathBuf {
        self.splits_dir.clone().unwrap_or_else(|| self.root.join("splits"))
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if self.image_size == 0 {
            errors.push("data.image_size must be >= 1".into());
        }
        if !(0.0 < self.train_ratio && self.train_ratio < 1.0) {
            errors.push(format!("data.train_ratio must be in (0, 1), got {}", self.train_ratio));
        }
        if self.repeats == 0 {
            errors.push("data.repeats must be >= 1".into());
        } else if self.split_index >= self.repeats {
            errors.push(format!(
                "data.split_index {} must be below data.repeats {}",
                self.split_index, self.repeats
            ));
        }
        if !(0.0 < self.labeled_fraction && self.labeled_fraction <= 1.0) {
            errors.push(format!(
                "data.labeled_fraction must be in (0, 1], got {}",
                self.labeled_fraction
            ));
        }
        if self.labeled_per_batch == 0 {
            errors.push("data.labeled_per_batch must be >= 1".into());
        }
        if self.mask_suffix.is_empty() {
            errors.push("data.mask_suffix must not be empty".into());
        }
        if self.extra_unlabeled_manifest.is_some() && self.extra_unlabeled_dir.is_none() {
            errors.push("data.extra_unlabeled_manifest needs data.extra_unlabeled_dir".into());
        }
        errors.extend(self.augment.validate());
        errors.extend(self.toy.validate());
        errors
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub w_max: f64,
    /// Warm-up length in steps; the full training length when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_max: Option<u64>,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            w_max: 0.1,
            t_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub mode: TrainMode,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub poly_power: f64,
    pub eval_every: usize,
    pub threshold: f64,
    pub averaging: Averaging,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Mgcc,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 300,
            poly_power: 0.9,
            eval_every: 5,
            threshold: 0.5,
            averaging: Averaging::Macro,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            errors.push(format!("optim.lr0 must be >= 0, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errors.push(format!("optim.momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 {
            errors.push("optim.weight_decay must be >= 0".into());
        }
        if self.epochs == 0 {
            errors.push("optim.epochs must be >= 1".into());
        }
        if self.poly_power < 0.0 {
            errors.push("optim.poly_power must be >= 0".into());
        }
        if self.eval_every == 0 {
            errors.push("optim.eval_every must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            errors.push("optim.threshold must be in [0, 1]".into());
        }
        errors
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdmConfig {
    pub vae: VaeConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub ddim: DdimConfig,
    /// Images generated by `generate` when no count is given.
    pub count: usize,
}

impl Default for LdmConfig {
    fn default() -> Self {
        Self {
            vae: VaeConfig {
                image_size: 512,
                ..VaeConfig::default()
            },
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            ddim: DdimConfig::default(),
            count: 725,
        }
    }
}

impl LdmConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errors = self.vae.validate();
        errors.extend(self.schedule.validate());
        errors.extend(self.denoiser.validate());
        errors.extend(self.ddim.validate(self.schedule.timesteps));
        if !self.vae.latent_size().is_multiple_of(2) {
            errors.push(format!(
                "ldm latent size {} must be even for the denoiser",
                self.vae.latent_size()
            ));
        }
        errors
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub objective: ObjectiveConfig,
    pub optim: OptimConfig,
    pub ldm: LdmConfig,
    pub run: RunSection,
}

impl RunConfig {
    /// CPU-sized preset: 64x64 inputs, narrow network, short schedules.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.data.image_size = 64;
        cfg.data.train_ratio = 2.0 / 3.0;
        cfg.data.labeled_fraction = 0.1;
        cfg.network = NetworkConfig::desk();
        cfg.optim.epochs = 40;
        cfg.optim.lr0 = 0.05;
        cfg.ldm.vae.image_size = 64;
        cfg.ldm.vae.lr = 1e-3;
        cfg.ldm.vae.epochs = 60;
        cfg.ldm.denoiser.base_channels = 32;
        cfg.ldm.denoiser.lr = 1e-3;
        cfg.ldm.denoiser.epochs = 200;
        cfg.ldm.count = 180;
        cfg.run.output_dir = PathBuf::from("runs/desk");
        cfg
    }

    /// Every problem at once, each naming its field.
    pub fn validate(&self) -> Vec<String> {
        let mut errors = self.data.validate();
        errors.extend(self.network.validate());
        errors.extend(self.optim.validate());
        errors.extend(self.ldm.validate());
        if !(self.objective.w_max > 0.0 && self.objective.w_max.is_finite()) {
            errors.push(format!("objective.w_max must be > 0, got {}", self.objective.w_max));
        }
        if self.objective.t_max == Some(0) {
            errors.push("objective.t_max must be >= 1".into());
        }
        let m = self.network.size_multiple();
        if !self.data.image_size.is_multiple_of(m) {
            errors.push(format!(
                "data.image_size {} must be a multiple of {m} for this network",
                self.data.image_size
            ));
        }
        errors
    }

    pub fn validated(self) -> Result<Self> {
        let errors = self.validate();
        if errors.is_empty() {
            Ok(self)
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Parses without validating.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string().trim().to_string()]))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always serializable")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msgs) => {
                Error::Config(msgs.into_iter().map(|m| format!("{}: {m}", path.display())).collect())
            }
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for cfg in [RunConfig::default(), RunConfig::desk()] {
            assert!(cfg.validate().is_empty(), "{:?}", cfg.validate());
            let text = cfg.to_toml();
            let back = RunConfig::from_toml(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.to_toml(), text);
        }
    }

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
        let partial = RunConfig::from_toml("[optim]\nepochs = 7\n").unwrap();
        assert_eq!(partial.optim.epochs, 7);
        assert_eq!(partial.optim.lr0, 0.01);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[optim]\nlearning_rate = 1.0\n").is_err());
        assert!(RunConfig::from_toml("[bogus]\n").is_err());
        assert!(RunConfig::from_toml("[network]\nperturbations = [{ kind = \"f-noise\", bound = 1 }]\n").is_err());
    }

    #[test]
    fn validation_collects_all_errors() {
        let mut cfg = RunConfig::default();
        cfg.optim.lr0 = -1.0;
        cfg.optim.momentum = 1.0;
        cfg.data.image_size = 100;
        cfg.network.convmixer_kernel = 4;
        let errs = cfg.validate();
        assert_eq!(errs.len(), 4, "{errs:?}");
        assert!(errs.iter().any(|e| e.starts_with("optim.lr0")));
        assert!(errs.iter().any(|e| e.contains("multiple of 16")));
    }

    #[test]
    fn modes_parse() {
        assert_eq!("mgcc".parse::<TrainMode>(), Ok(TrainMode::Mgcc));
        assert_eq!("supervised".parse::<TrainMode>(), Ok(TrainMode::Supervised));
        assert!("both".parse::<TrainMode>().is_err());
    }
}
