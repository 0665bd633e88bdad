use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{center_resize, Frame};
use crate::contrastive::{MoCoState, TrainConfig};
use crate::data::Checkpoint;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which backbone outputs form the feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    Student,
    Teacher,
    /// `F^t + F^s`
    Addition,
    /// `[F^t ; F^s]`
    Concatenation,
}

impl FeatureMode {
    pub const ALL: [FeatureMode; 4] = [Self::Student, Self::Teacher, Self::Addition, Self::Concatenation];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Student => "student",
            Self::Teacher => "teacher",
            Self::Addition => "addition",
            Self::Concatenation => "concatenation",
        }
    }

    pub fn needs_student(self) -> bool {
        self != Self::Teacher
    }

    pub fn needs_teacher(self) -> bool {
        self != Self::Student
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown feature mode \"{s}\"")))
    }
}

/// `n×D` features with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl FeatureSet {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rank() != 2 || features.rows() != labels.len() {
            return Err(Error::Contract(format!(
                "{} labels for feature matrix {:?}",
                labels.len(),
                features.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Contract(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> FeatureSet {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
        }
        FeatureSet {
            features: Tensor::new(vec![idx.len(), d], data).expect("shape"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

const CHUNK: usize = 128;

fn backbone_features(enc: &EncoderParams, frames: &[Frame]) -> Result<Tensor> {
    let size = enc.config.input_size;
    let mut data = Vec::with_capacity(frames.len() * enc.config.d_backbone);
    for chunk in frames.chunks(CHUNK) {
        let resized: Vec<Frame> = chunk
            .iter()
            .map(|f| center_resize(f, size))
            .collect::<Result<_>>()?;
        data.extend(enc.features(&resized)?.into_data());
    }
    Tensor::new(vec![frames.len(), enc.config.d_backbone], data)
}

/// Pre-head backbone features per frame under `mode`. No augmentation.
pub fn extract_features(
    student: Option<&EncoderParams>,
    teacher: Option<&EncoderParams>,
    frames: &[Frame],
    mode: FeatureMode,
) -> Result<Tensor> {
    fn need<'a>(e: Option<&'a EncoderParams>, what: &str, mode: FeatureMode) -> Result<&'a EncoderParams> {
        e.ok_or_else(|| Error::Contract(format!("feature mode {mode} needs a {what} encoder")))
    }
    match mode {
        FeatureMode::Student => backbone_features(need(student, "student", mode)?, frames),
        FeatureMode::Teacher => backbone_features(need(teacher, "teacher", mode)?, frames),
        FeatureMode::Addition | FeatureMode::Concatenation => {
            let fs = backbone_features(need(student, "student", mode)?, frames)?;
            let ft = backbone_features(need(teacher, "teacher", mode)?, frames)?;
            if mode == FeatureMode::Addition {
                if fs.shape() != ft.shape() {
                    return Err(Error::Contract(format!(
                        "addition needs equal feature dims, got {:?} and {:?}",
                        ft.shape(),
                        fs.shape()
                    )));
                }
                let mut sum = ft;
                sum.add_assign(&fs);
                Ok(sum)
            } else {
                let n = frames.len();
                let (dt, ds) = (ft.cols(), fs.cols());
                let mut data = Vec::with_capacity(n * (dt + ds));
                for i in 0..n {
                    data.extend_from_slice(ft.row(i));
                    data.extend_from_slice(fs.row(i));
                }
                Tensor::new(vec![n, dt + ds], data)
            }
        }
    }
}

/// Student MoCo state whose query and key encoders both start from the
/// teacher checkpoint's `query` group.
pub fn init_transfer(teacher_ckpt: &Checkpoint, arch: &EncoderConfig, cfg: TrainConfig) -> Result<MoCoState> {
    let enc = teacher_ckpt.encoder("query", arch)?;
    MoCoState::new(enc, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn setup() -> (EncoderParams, EncoderParams, Vec<Frame>) {
        let cfg = EncoderConfig { input_size: [8, 8], d_backbone: 6, d_embed: 4, ..Default::default() };
        let s = EncoderParams::init(cfg, &mut Rng::new(1)).unwrap();
        let t = EncoderParams::init(cfg, &mut Rng::new(2)).unwrap();
        let mut r = Rng::new(3);
        let frames = (0..5)
            .map(|_| Frame::new(Tensor::new(vec![1, 8, 8], (0..64).map(|_| r.uniform()).collect()).unwrap()).unwrap())
            .collect();
        (s, t, frames)
    }

    #[test]
    fn concatenation_dim_and_order() {
        let (s, t, fr) = setup();
        let c = extract_features(Some(&s), Some(&t), &fr, FeatureMode::Concatenation).unwrap();
        assert_eq!(c.shape(), &[5, 12]);
        let ft = extract_features(None, Some(&t), &fr, FeatureMode::Teacher).unwrap();
        assert_eq!(&c.row(2)[..6], ft.row(2));
    }

    #[test]
    fn addition_of_self_is_double() {
        let (s, _, fr) = setup();
        let a = extract_features(Some(&s), Some(&s), &fr, FeatureMode::Addition).unwrap();
        let f = extract_features(Some(&s), None, &fr, FeatureMode::Student).unwrap();
        assert!(a.bitwise_eq(&f.map(|v| 2.0 * v)));
        let again = extract_features(Some(&s), Some(&s), &fr, FeatureMode::Addition).unwrap();
        assert!(a.bitwise_eq(&again));
    }

    #[test]
    fn addition_dim_mismatch() {
        let (s, _, fr) = setup();
        let cfg = EncoderConfig { input_size: [8, 8], d_backbone: 7, d_embed: 4, ..Default::default() };
        let t = EncoderParams::init(cfg, &mut Rng::new(2)).unwrap();
        assert!(matches!(
            extract_features(Some(&s), Some(&t), &fr, FeatureMode::Addition),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn mode_round_trips_through_str() {
        for m in FeatureMode::ALL {
            assert_eq!(m.as_str().parse::<FeatureMode>().unwrap(), m);
        }
        assert!("bogus".parse::<FeatureMode>().is_err());
    }
}
