#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use distill_ssl::augment::Frame;
use distill_ssl::contrastive::{MoCoState, TrainConfig};
use distill_ssl::data::{generate_synthetic_dataset, synthetic::unzip, SyntheticSpec};
use distill_ssl::distill::TeacherState;
use distill_ssl::encoder::{EncoderConfig, EncoderParams};
use distill_ssl::rng::Rng;

/// Small encoder and queue so training tests stay fast.
pub fn small_arch() -> EncoderConfig {
    EncoderConfig {
        input_size: [16, 16],
        d_backbone: 16,
        d_embed: 8,
        ..Default::default()
    }
}

pub fn small_train(steps: usize, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        batch_size: 8,
        queue_size: 32,
        steps,
        seed,
        ..Default::default()
    };
    cfg.augment.output_size = [16, 16];
    cfg
}

pub fn toy_frames(n_per_class: usize, seed: u64) -> (Vec<Frame>, Vec<usize>) {
    let spec = SyntheticSpec {
        frames_per_phase: n_per_class,
        image_size: [16, 16],
        ..SyntheticSpec::target_default()
    };
    unzip(&generate_synthetic_dataset(&spec, seed).unwrap())
}

pub fn fresh_state(seed: u64, cfg: TrainConfig) -> MoCoState {
    let enc = EncoderParams::init(small_arch(), &mut Rng::new(seed)).unwrap();
    MoCoState::new(enc, cfg).unwrap()
}

/// Teacher that is an exact copy of `s`, backbones frozen.
pub fn teacher_copy(s: &MoCoState) -> TeacherState {
    let mut moco = s.clone();
    moco.query.freeze_backbone(true);
    moco.key.freeze_backbone(true);
    TeacherState { moco }
}

pub const BIN: &str = env!("CARGO_BIN_EXE_distill-ssl");

pub fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.json");
    let cfg = serde_json::json!({
        "image_size": [16, 16],
        "d_backbone": 16,
        "d_embed": 8,
        "batch_size": 8,
        "queue_size": 16,
        "steps": 4,
        "target_frames_per_phase": 8,
        "generic_frames_per_class": 8,
        "probe_steps": 20,
        "probe_seeds": [0, 1],
        "fractions": [0.5, 1.0],
        "gradcheck_instances": 2,
        "seed": 5
    });
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path
}

pub fn run_cli(cfg: &Path, out: &Path, args: &[&str]) {
    let o = Command::new(BIN)
        .args(args)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "config.json" {
                files.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    files
}

/// Runs the whole command chain into `root`, returning each command's out dir.
pub fn chain(root: &Path, cfg: &Path) -> Vec<PathBuf> {
    let d = |n: &str| root.join(n);
    let ck = |n: &str, stem: &str| d(n).join(stem).to_string_lossy().into_owned();
    run_cli(cfg, &d("data"), &["gen-data"]);
    run_cli(cfg, &d("generic"), &["pretrain-generic"]);
    run_cli(cfg, &d("teacher"), &["adapt-teacher", "--generic-ckpt", &ck("generic", "generic.json")]);
    let teacher = ck("teacher", "teacher");
    run_cli(cfg, &d("plain"), &["pretrain-student"]);
    run_cli(cfg, &d("distilled"), &["pretrain-student", "--distill", "--teacher-ckpt", &teacher]);
    run_cli(cfg, &d("init"), &["pretrain-student", "--init", "--teacher-ckpt", &teacher]);
    let student = ck("distilled", "student");
    run_cli(cfg, &d("probe"), &["linear-probe", "--student-ckpt", &student]);
    run_cli(cfg, &d("probe_add"), &["linear-probe", "--mode", "addition", "--student-ckpt", &student, "--teacher-ckpt", &teacher]);
    run_cli(cfg, &d("sweep"), &["sweep-labels", "--student-ckpt", &student, "--teacher-ckpt", &teacher, "--mode", "concatenation"]);
    run_cli(cfg, &d("ablate"), &["ablate-transfer", "--teacher-ckpt", &teacher]);
    run_cli(cfg, &d("grad"), &["gradcheck"]);
    run_cli(cfg, &d("pipeline"), &["pipeline"]);
    ["data", "generic", "teacher", "plain", "distilled", "init", "probe", "probe_add", "sweep", "ablate", "grad", "pipeline"]
        .iter()
        .map(|n| d(n))
        .collect()
}
