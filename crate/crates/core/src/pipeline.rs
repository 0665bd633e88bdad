//! Pipeline stages built on the library: data, generic pretraining, teacher
//! adaptation, student pretraining, probing, sweeps and the transfer ablation.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::augment::Frame;
use crate::config::RunConfig;
use crate::contrastive::{MoCoState, TrainConfig};
use crate::data::{
    generate_synthetic_dataset, load_checkpoint, load_image_directory, synthetic::unzip, Checkpoint,
};
use crate::distill::{distill_fit, init_teacher, StepLosses, TeacherState};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{
    compute_phase_metrics, fit_linear_probe, init_transfer, label_efficiency_sweep, split_train_test,
    FeatureMode, FeatureSet, SweepEncoder, SweepResult,
};
use crate::rng::Rng;

const STAGE_GENERIC: u64 = 1;
const STAGE_TEACHER: u64 = 2;
const STAGE_STUDENT: u64 = 3;

/// Frames with optional labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub frames: Vec<Frame>,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Contract("this command needs labelled data (class subdirectories)".into()))
    }
}

fn load_or_synthesize(dir: Option<&Path>, cfg: &RunConfig, spec: crate::data::SyntheticSpec) -> Result<Dataset> {
    match dir {
        Some(d) => {
            let img = load_image_directory(d, cfg.in_channels, cfg.image_size)?;
            if img.frames.is_empty() {
                return Err(Error::Contract(format!("no .pgm/.ppm images under {}", d.display())));
            }
            Ok(Dataset {
                frames: img.frames,
                num_classes: img.class_names.len(),
                labels: img.labels,
            })
        }
        None => {
            let (frames, labels) = unzip(&generate_synthetic_dataset(&spec, cfg.data_seed)?);
            Ok(Dataset {
                frames,
                labels: Some(labels),
                num_classes: spec.num_phases,
            })
        }
    }
}

pub fn target_data(cfg: &RunConfig) -> Result<Dataset> {
    load_or_synthesize(cfg.data_dir.as_deref(), cfg, cfg.target_spec())
}

pub fn generic_data(cfg: &RunConfig) -> Result<Dataset> {
    load_or_synthesize(cfg.generic_data_dir.as_deref(), cfg, cfg.generic_spec())
}

/// `query` and `key` groups of a MoCo state.
pub fn moco_checkpoint(state: &MoCoState) -> Checkpoint {
    Checkpoint::new(state.query.config)
        .with_encoder("query", &state.query)
        .with_encoder("key", &state.key)
}

fn fresh_encoder(arch: EncoderConfig, seed: u64, stage: u64) -> Result<EncoderParams> {
    EncoderParams::init(arch, &mut Rng::stream(seed, &[stage, 0]))
}

fn stage_rng(seed: u64, stage: u64) -> Rng {
    Rng::stream(seed, &[stage, 1])
}

/// Plain contrastive pretraining on the generic domain.
pub fn pretrain_generic(
    cfg: &RunConfig,
    data: &[Frame],
    on_step: impl FnMut(u64, f64),
) -> Result<(MoCoState, Vec<f64>)> {
    let enc = fresh_encoder(cfg.encoder(), cfg.seed, STAGE_GENERIC)?;
    let mut state = MoCoState::new(enc, cfg.train())?;
    let losses = state.fit(data, &mut stage_rng(cfg.seed, STAGE_GENERIC), on_step)?;
    Ok((state, losses))
}

/// Semantic-preserving adaptation: backbone frozen (unless disabled), head
/// trained contrastively on the target domain.
pub fn adapt_teacher(
    cfg: &RunConfig,
    generic: &Checkpoint,
    data: &[Frame],
    on_step: impl FnMut(u64, f64),
) -> Result<(TeacherState, Vec<f64>)> {
    let mut teacher = init_teacher(generic, &cfg.encoder(), cfg.train(), cfg.freeze_backbone)?;
    let losses = teacher.moco.fit(data, &mut stage_rng(cfg.seed, STAGE_TEACHER), on_step)?;
    Ok((teacher, losses))
}

/// Adapted teacher restored from its `query`/`key` groups, backbones frozen.
pub fn load_teacher(ckpt: &Checkpoint, arch: &EncoderConfig, train: TrainConfig) -> Result<TeacherState> {
    let mut moco = MoCoState::new(ckpt.encoder("query", arch)?, train)?;
    moco.key = ckpt.encoder("key", arch)?;
    moco.query.freeze_backbone(true);
    moco.key.freeze_backbone(true);
    Ok(TeacherState { moco })
}

/// How the student starts and what it optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentArm {
    /// Random init, InfoNCE only.
    Plain,
    /// Random init, InfoNCE plus λ·KL to the teacher.
    Distill,
    /// Teacher weights as init, InfoNCE only.
    Init,
}

pub fn pretrain_student(
    cfg: &RunConfig,
    arm: StudentArm,
    teacher: Option<&Checkpoint>,
    data: &[Frame],
    mut on_step: impl FnMut(u64, &StepLosses),
) -> Result<(MoCoState, Vec<StepLosses>)> {
    let arch = cfg.encoder();
    let train = cfg.train();
    let mut rng = stage_rng(cfg.seed, STAGE_STUDENT);
    let need_teacher = || teacher.ok_or_else(|| Error::Contract(format!("student arm {arm:?} needs a teacher checkpoint")));
    match arm {
        StudentArm::Plain | StudentArm::Init => {
            let mut state = if arm == StudentArm::Init {
                init_transfer(need_teacher()?, &arch, train)?
            } else {
                MoCoState::new(fresh_encoder(arch, cfg.seed, STAGE_STUDENT)?, train)?
            };
            let losses = state.fit(data, &mut rng, |s, l| {
                on_step(
                    s,
                    &StepLosses {
                        contrastive: l,
                        distill: 0.0,
                        total: l,
                    },
                )
            })?;
            let losses = losses
                .into_iter()
                .map(|l| StepLosses {
                    contrastive: l,
                    distill: 0.0,
                    total: l,
                })
                .collect();
            Ok((state, losses))
        }
        StudentArm::Distill => {
            let mut t = load_teacher(need_teacher()?, &arch, train)?;
            let mut state = MoCoState::new(fresh_encoder(arch, cfg.seed, STAGE_STUDENT)?, train)?;
            let losses = distill_fit(&mut state, &mut t, data, &mut rng, on_step)?;
            Ok((state, losses))
        }
    }
}

/// Mean of the first and last `window` values; the loss-drop criterion
/// compares these smoothed endpoints.
pub fn loss_endpoints(losses: &[f64], window: usize) -> (f64, f64) {
    let w = window.clamp(1, losses.len().max(1));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    (mean(&losses[..w.min(losses.len())]), mean(&losses[losses.len().saturating_sub(w)..]))
}

/// Encoders referenced by a feature mode.
pub fn sweep_encoder(
    name: &str,
    mode: FeatureMode,
    student: Option<&EncoderParams>,
    teacher: Option<&EncoderParams>,
) -> SweepEncoder {
    SweepEncoder {
        name: name.to_string(),
        mode,
        student: student.filter(|_| mode.needs_student()).cloned(),
        teacher: teacher.filter(|_| mode.needs_teacher()).cloned(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRun {
    pub seed: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
}

/// Probes on the train split at `fraction`, scores the held-out split, once per seed.
pub fn probe_runs(cfg: &RunConfig, enc: &SweepEncoder, data: &Dataset, fraction: f64) -> Result<Vec<ProbeRun>> {
    let labels = data.labels()?;
    let all = FeatureSet::new(enc.features(&data.frames)?, labels.to_vec(), data.num_classes)?;
    let (tr, te) = split_train_test(labels, data.num_classes);
    let (train, test) = (all.select(&tr), all.select(&te));
    cfg.probe_seeds
        .iter()
        .map(|&seed| {
            let p = fit_linear_probe(&train, &cfg.probe(fraction, seed))?;
            let m = compute_phase_metrics(&p.predict(&test.features)?, &test.labels, data.num_classes)?;
            Ok(ProbeRun {
                seed,
                accuracy: m.accuracy,
                precision: m.precision,
                recall: m.recall,
                jaccard: m.jaccard,
            })
        })
        .collect()
}

pub fn mean_accuracy(runs: &[ProbeRun]) -> f64 {
    runs.iter().map(|r| r.accuracy).sum::<f64>() / runs.len().max(1) as f64
}

pub fn sweep(cfg: &RunConfig, encoders: &[SweepEncoder], data: &Dataset) -> Result<SweepResult> {
    label_efficiency_sweep(
        encoders,
        &cfg.fractions,
        &cfg.probe_seeds,
        &data.frames,
        data.labels()?,
        data.num_classes,
        &cfg.probe(1.0, 0),
    )
}

pub fn load_encoder(path: &Path, group: &str, arch: &EncoderConfig) -> Result<EncoderParams> {
    load_checkpoint(path)?.encoder(group, arch)
}

/// One row of the transfer ablation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub arm: String,
    pub mode: FeatureMode,
    pub fraction: f64,
    pub runs: Vec<ProbeRun>,
}

impl AblationRow {
    pub fn mean(&self, f: fn(&ProbeRun) -> f64) -> f64 {
        self.runs.iter().map(f).sum::<f64>() / self.runs.len().max(1) as f64
    }
}

pub const ABLATION_HEADER: &str = "arm,mode,fraction,seed,accuracy,precision,recall,jaccard";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        for p in &r.runs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.arm, r.mode, r.fraction, p.seed, p.accuracy, p.precision, p.recall, p.jaccard
            );
        }
    }
    s
}

/// Students needed by the ablation, trained against one teacher.
pub struct AblationModels {
    pub teacher: EncoderParams,
    pub plain: EncoderParams,
    pub init: EncoderParams,
    pub distill: EncoderParams,
    pub checkpoints: Vec<(String, Checkpoint)>,
}

pub fn train_ablation_models(
    cfg: &RunConfig,
    teacher_ckpt: &Checkpoint,
    data: &[Frame],
    mut progress: impl FnMut(&str, u64, &StepLosses),
) -> Result<AblationModels> {
    let arch = cfg.encoder();
    let mut checkpoints = Vec::new();
    let mut train = |arm: StudentArm, name: &str| -> Result<EncoderParams> {
        let (s, _) = pretrain_student(cfg, arm, Some(teacher_ckpt), data, |k, l| progress(name, k, l))?;
        checkpoints.push((format!("student_{name}"), moco_checkpoint(&s)));
        Ok(s.query)
    };
    let plain = train(StudentArm::Plain, "plain")?;
    let init = train(StudentArm::Init, "init")?;
    let distill = train(StudentArm::Distill, "distill")?;
    Ok(AblationModels {
        teacher: teacher_ckpt.encoder("query", &arch)?,
        plain,
        init,
        distill,
        checkpoints,
    })
}

/// The four transfer arms, each probed at `cfg.label_fraction` over `cfg.probe_seeds`.
pub fn transfer_ablation(cfg: &RunConfig, models: &AblationModels, data: &Dataset) -> Result<Vec<AblationRow>> {
    let arms = [
        ("addition", FeatureMode::Addition, &models.plain),
        ("concatenation", FeatureMode::Concatenation, &models.plain),
        ("initialization", FeatureMode::Student, &models.init),
        ("distillation", FeatureMode::Student, &models.distill),
    ];
    arms.iter()
        .map(|(arm, mode, student)| {
            let enc = sweep_encoder(arm, *mode, Some(student), Some(&models.teacher));
            Ok(AblationRow {
                arm: arm.to_string(),
                mode: *mode,
                fraction: cfg.label_fraction,
                runs: probe_runs(cfg, &enc, data, cfg.label_fraction)?,
            })
        })
        .collect()
}
