//! Flat JSON run configuration shared by every command.
//!
//! Resolution order per key: command-line flag, then config file, then the
//! built-in default. `DISTILL_SSL_SEED` supplies `seed` when neither a flag
//! nor the file sets it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::augment::AugmentConfig;
use crate::contrastive::TrainConfig;
use crate::data::SyntheticSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{FeatureMode, ProbeConfig};

pub const SEED_ENV: &str = "DISTILL_SSL_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Training and initialisation seed.
    pub seed: u64,
    /// Seed for synthetic data; kept apart so runs can share a dataset.
    pub data_seed: u64,

    pub in_channels: usize,
    pub image_size: [usize; 2],
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub d_backbone: usize,
    pub d_embed: usize,

    pub tau: f64,
    pub m: f64,
    pub lambda: f64,
    /// Distillation temperature; `null` means `tau`.
    pub distill_tau: Option<f64>,
    pub batch_size: usize,
    pub queue_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,

    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub flip_prob: f64,
    pub brightness_delta: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub augment_noise_sigma: f64,

    pub target_frames_per_phase: usize,
    pub generic_frames_per_class: usize,
    pub synthetic_noise_sigma: f64,

    /// Freeze the teacher backbone while adapting its head.
    pub freeze_backbone: bool,
    /// `pretrain-student`: add the distillation term.
    pub distill: bool,
    /// `pretrain-student`: start from the teacher's weights.
    pub init_from_teacher: bool,

    pub probe_lr: f64,
    pub probe_steps: usize,
    pub probe_weight_decay: f64,
    pub label_fraction: f64,
    pub probe_seeds: Vec<u64>,
    pub fractions: Vec<f64>,
    pub mode: FeatureMode,

    /// Netpbm directory for the target domain; synthetic data when absent.
    pub data_dir: Option<PathBuf>,
    /// Netpbm directory for the generic domain; synthetic data when absent.
    pub generic_data_dir: Option<PathBuf>,
    pub generic_ckpt: Option<PathBuf>,
    pub teacher_ckpt: Option<PathBuf>,
    pub student_ckpt: Option<PathBuf>,
    pub out: PathBuf,

    pub gradcheck_instances: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let tr = TrainConfig::default();
        let aug = AugmentConfig::default();
        let probe = ProbeConfig::default();
        Self {
            seed: 0,
            data_seed: 0,
            in_channels: enc.in_channels,
            image_size: enc.input_size,
            conv1_channels: enc.conv1_channels,
            conv2_channels: enc.conv2_channels,
            d_backbone: enc.d_backbone,
            d_embed: enc.d_embed,
            tau: tr.tau,
            m: tr.m,
            lambda: tr.lambda,
            distill_tau: tr.distill_tau,
            batch_size: tr.batch_size,
            queue_size: tr.queue_size,
            lr: tr.lr,
            momentum: tr.momentum,
            weight_decay: tr.weight_decay,
            steps: tr.steps,
            crop_scale_min: aug.crop_scale_range[0],
            crop_scale_max: aug.crop_scale_range[1],
            flip_prob: aug.flip_prob,
            brightness_delta: aug.brightness_delta,
            contrast_min: aug.contrast_range[0],
            contrast_max: aug.contrast_range[1],
            augment_noise_sigma: aug.noise_sigma,
            target_frames_per_phase: 300,
            generic_frames_per_class: 300,
            synthetic_noise_sigma: 0.05,
            freeze_backbone: true,
            distill: false,
            init_from_teacher: false,
            probe_lr: probe.lr,
            probe_steps: probe.steps,
            probe_weight_decay: probe.weight_decay,
            label_fraction: 0.1,
            probe_seeds: vec![0, 1, 2],
            fractions: vec![0.05, 0.1, 0.5, 1.0],
            mode: FeatureMode::Student,
            data_dir: None,
            generic_data_dir: None,
            generic_ckpt: None,
            teacher_ckpt: None,
            student_ckpt: None,
            out: PathBuf::from("out"),
            gradcheck_instances: 100,
        }
    }
}

impl RunConfig {
    /// Layers `file` and then `overrides` (both flat JSON objects) over the
    /// defaults. `env_seed` applies only when neither layer sets `seed`.
    pub fn resolve(file: Option<&Map<String, Value>>, overrides: &Map<String, Value>, env_seed: Option<&str>) -> Result<Self> {
        let Value::Object(mut merged) = serde_json::to_value(RunConfig::default())? else {
            unreachable!("struct serialises to an object");
        };
        for layer in file.into_iter().chain(std::iter::once(overrides)) {
            for (k, v) in layer {
                if !merged.contains_key(k) {
                    return Err(Error::Config(format!("unknown configuration key \"{k}\"")));
                }
                merged.insert(k.clone(), v.clone());
            }
        }
        let seed_set = file.is_some_and(|f| f.contains_key("seed")) || overrides.contains_key("seed");
        if let (false, Some(s)) = (seed_set, env_seed) {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=\"{s}\" is not an unsigned integer")))?;
            merged.insert("seed".into(), seed.into());
        }
        let cfg: RunConfig =
            serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read_file(path: &Path) -> Result<Map<String, Value>> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        match serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))? {
            Value::Object(m) => Ok(m),
            _ => Err(Error::Config(format!("{}: top level must be an object", path.display()))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        self.train().validate()?;
        self.target_spec().validate()?;
        self.generic_spec().validate()?;
        self.probe(self.label_fraction, 0).validate()?;
        if self.probe_seeds.is_empty() || self.fractions.is_empty() {
            return Err(Error::Config("probe_seeds and fractions must be non-empty".into()));
        }
        if let Some(f) = self.fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::Config(format!("fraction {f} outside (0, 1]")));
        }
        if self.distill && self.init_from_teacher {
            return Err(Error::Config("distill and init_from_teacher are mutually exclusive".into()));
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            in_channels: self.in_channels,
            input_size: self.image_size,
            conv1_channels: self.conv1_channels,
            conv2_channels: self.conv2_channels,
            d_backbone: self.d_backbone,
            d_embed: self.d_embed,
            ..EncoderConfig::default()
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            crop_scale_range: [self.crop_scale_min, self.crop_scale_max],
            flip_prob: self.flip_prob,
            brightness_delta: self.brightness_delta,
            contrast_range: [self.contrast_min, self.contrast_max],
            noise_sigma: self.augment_noise_sigma,
            output_size: self.image_size,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            tau: self.tau,
            m: self.m,
            lambda: self.lambda,
            distill_tau: self.distill_tau,
            batch_size: self.batch_size,
            queue_size: self.queue_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            steps: self.steps,
            seed: self.seed,
            augment: self.augment(),
        }
    }

    pub fn probe(&self, label_fraction: f64, seed: u64) -> ProbeConfig {
        ProbeConfig {
            lr: self.probe_lr,
            steps: self.probe_steps,
            weight_decay: self.probe_weight_decay,
            label_fraction,
            seed,
        }
    }

    fn with_shape(&self, mut s: SyntheticSpec, per_class: usize) -> SyntheticSpec {
        s.frames_per_phase = per_class;
        s.image_size = self.image_size;
        s.channels = self.in_channels;
        s.noise_sigma = self.synthetic_noise_sigma;
        s
    }

    pub fn target_spec(&self) -> SyntheticSpec {
        self.with_shape(SyntheticSpec::target_default(), self.target_frames_per_phase)
    }

    pub fn generic_spec(&self) -> SyntheticSpec {
        self.with_shape(SyntheticSpec::generic_default(), self.generic_frames_per_class)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn obj(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let file = obj(json!({"steps": 10, "lambda": 2.0}));
        let flags = obj(json!({"steps": 20}));
        let c = RunConfig::resolve(Some(&file), &flags, None).unwrap();
        assert_eq!(c.steps, 20);
        assert_eq!(c.lambda, 2.0);
        assert_eq!(c.tau, 0.07);
    }

    #[test]
    fn unknown_key_rejected() {
        let file = obj(json!({"stepz": 10}));
        let err = RunConfig::resolve(Some(&file), &Map::new(), None).unwrap_err();
        assert!(err.to_string().contains("stepz"));
    }

    #[test]
    fn env_seed_is_last_resort() {
        assert_eq!(RunConfig::resolve(None, &Map::new(), Some("42")).unwrap().seed, 42);
        let file = obj(json!({"seed": 7}));
        assert_eq!(RunConfig::resolve(Some(&file), &Map::new(), Some("42")).unwrap().seed, 7);
        assert!(RunConfig::resolve(None, &Map::new(), Some("x")).is_err());
    }

    #[test]
    fn serialised_config_round_trips() {
        let c = RunConfig::default();
        let file = obj(serde_json::from_str(&c.to_json().unwrap()).unwrap());
        assert_eq!(RunConfig::resolve(Some(&file), &Map::new(), Some("9")).unwrap(), c);
    }

    #[test]
    fn invalid_values_rejected() {
        let flags = obj(json!({"queue_size": 100}));
        assert!(RunConfig::resolve(None, &flags, None).is_err());
        let flags = obj(json!({"fractions": [0.0]}));
        assert!(RunConfig::resolve(None, &flags, None).is_err());
    }
}
