//! Command-line front end. Progress goes to stderr; results go to `--out`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

use crate::augment::Frame;
use crate::config::{RunConfig, SEED_ENV};
use crate::data::{generate_synthetic_dataset, load_checkpoint, save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::eval::{accuracy_chart_svg, FeatureMode};
use crate::gradcheck_suite::{format_report, run_gradcheck_suite};
use crate::pipeline::{self, StudentArm};

#[derive(Debug, Parser)]
#[command(name = "distill-ssl", version, about = "Distilled momentum-contrastive self-supervised learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic target and generic datasets as PGM images.
    GenData(Common),
    /// Contrastive pretraining on the generic domain.
    PretrainGeneric(Common),
    /// Adapt the teacher head on target data with a frozen backbone.
    AdaptTeacher(Common),
    /// Contrastive student pretraining, optionally distilled or teacher-initialised.
    PretrainStudent(Common),
    /// Linear probe on frozen features.
    LinearProbe(Common),
    /// Probe accuracy across label fractions and seeds.
    SweepLabels(Common),
    /// Finite-difference check of every differentiable op and loss.
    Gradcheck(Common),
    /// Addition, concatenation, initialization and distillation arms side by side.
    AblateTransfer(Common),
    /// Generic pretraining, teacher adaptation, distilled student and probe in one run.
    Pipeline(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Flat JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    queue_size: Option<usize>,
    /// Target-domain Netpbm directory (synthetic data when omitted).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Generic-domain Netpbm directory (synthetic data when omitted).
    #[arg(long)]
    generic_data: Option<PathBuf>,
    #[arg(long)]
    generic_ckpt: Option<PathBuf>,
    #[arg(long)]
    teacher_ckpt: Option<PathBuf>,
    #[arg(long)]
    student_ckpt: Option<PathBuf>,
    #[arg(long)]
    label_fraction: Option<f64>,
    /// student, teacher, addition or concatenation.
    #[arg(long)]
    mode: Option<FeatureMode>,
    /// Comma-separated label fractions.
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    /// Comma-separated probe seeds.
    #[arg(long, value_delimiter = ',')]
    probe_seeds: Option<Vec<u64>>,
    /// Add the distillation term (pretrain-student).
    #[arg(long)]
    distill: bool,
    /// Initialise the student from the teacher (pretrain-student).
    #[arg(long)]
    init: bool,
    /// Train the teacher backbone as well (adapt-teacher).
    #[arg(long)]
    no_freeze: bool,
    /// Finite-difference instances per op (gradcheck).
    #[arg(long)]
    instances: Option<usize>,
    /// Override any configuration key, e.g. `--set probe_steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Result<Map<String, Value>> {
        let mut m = Map::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| Value::from(p.to_string_lossy().into_owned()));
        put("out", path(&self.out));
        put("seed", self.seed.map(Value::from));
        put("data_seed", self.data_seed.map(Value::from));
        put("steps", self.steps.map(Value::from));
        put("lambda", self.lambda.map(Value::from));
        put("tau", self.tau.map(Value::from));
        put("lr", self.lr.map(Value::from));
        put("batch_size", self.batch_size.map(Value::from));
        put("queue_size", self.queue_size.map(Value::from));
        put("data_dir", path(&self.data));
        put("generic_data_dir", path(&self.generic_data));
        put("generic_ckpt", path(&self.generic_ckpt));
        put("teacher_ckpt", path(&self.teacher_ckpt));
        put("student_ckpt", path(&self.student_ckpt));
        put("label_fraction", self.label_fraction.map(Value::from));
        put("mode", self.mode.map(|m| Value::from(m.as_str())));
        put("fractions", self.fractions.clone().map(Value::from));
        put("probe_seeds", self.probe_seeds.clone().map(Value::from));
        put("distill", self.distill.then_some(Value::Bool(true)));
        put("init_from_teacher", self.init.then_some(Value::Bool(true)));
        put("freeze_backbone", self.no_freeze.then_some(Value::Bool(false)));
        put("gradcheck_instances", self.instances.map(Value::from));
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got \"{kv}\"")))?;
            let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            m.insert(k.to_string(), v);
        }
        Ok(m)
    }

    fn resolve(&self) -> Result<RunConfig> {
        let file = self.config.as_deref().map(RunConfig::read_file).transpose()?;
        let env = std::env::var(SEED_ENV).ok();
        RunConfig::resolve(file.as_ref(), &self.overrides()?, env.as_deref())
    }
}

fn progress(msg: impl AsRef<str>) {
    eprintln!("[distill-ssl] {}", msg.as_ref());
}

/// Accepts `x`, `x.json` or `x.bin` for the checkpoint pair `x.json`/`x.bin`.
fn stem(p: &Path) -> PathBuf {
    match p.extension().and_then(|e| e.to_str()) {
        Some("json" | "bin") => p.with_extension(""),
        _ => p.to_path_buf(),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::Config(format!("missing required {what} (flag or config key)")))
}

fn load_ckpt(p: &Option<PathBuf>, what: &str) -> Result<Checkpoint> {
    load_checkpoint(&stem(required(p, what)?))
}

struct Output {
    dir: PathBuf,
}

impl Output {
    fn create(cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(&cfg.out)?;
        let out = Self { dir: cfg.out.clone() };
        out.write("config.json", &(cfg.to_json()? + "\n"))?;
        Ok(out)
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.dir.join(name), contents)?;
        Ok(())
    }

    fn checkpoint(&self, name: &str, ckpt: &Checkpoint) -> Result<()> {
        let stem = self.dir.join(name);
        save_checkpoint(ckpt, &stem)?;
        progress(format!("checkpoint {}", stem.display()));
        Ok(())
    }
}

fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{l}", i + 1);
    }
    s
}

fn step_csv(losses: &[crate::distill::StepLosses]) -> String {
    let mut s = String::from("step,contrastive,distill,total\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{}", i + 1, l.contrastive, l.distill, l.total);
    }
    s
}

fn every(n: usize) -> impl Fn(u64) -> bool {
    move |k| k == 1 || k % n as u64 == 0
}

fn log_loss(stage: &'static str, steps: usize) -> impl FnMut(u64, f64) {
    let show = every((steps / 10).max(1));
    move |k, l| {
        if show(k) {
            progress(format!("{stage} step {k}/{steps} loss {l:.4}"));
        }
    }
}

fn log_step(stage: &'static str, steps: usize) -> impl FnMut(u64, &crate::distill::StepLosses) {
    let show = every((steps / 10).max(1));
    move |k, l| {
        if show(k) {
            progress(format!(
                "{stage} step {k}/{steps} total {:.4} (contrastive {:.4}, distill {:.5})",
                l.total, l.contrastive, l.distill
            ));
        }
    }
}

fn write_pgm(path: &Path, frame: &Frame) -> Result<()> {
    let (h, w) = (frame.height(), frame.width());
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    // first channel only; synthetic data is grayscale
    bytes.extend(frame.pixels().data()[..h * w].iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    fs::write(path, bytes)?;
    Ok(())
}

fn gen_data(cfg: &RunConfig, out: &Output) -> Result<()> {
    let mut csv = String::from("domain,class,frames\n");
    for (name, spec) in [("target", cfg.target_spec()), ("generic", cfg.generic_spec())] {
        let frames = generate_synthetic_dataset(&spec, cfg.data_seed)?;
        for lf in &frames {
            let dir = out.dir.join(name).join(format!("class_{:02}", lf.phase));
            fs::create_dir_all(&dir)?;
        }
        let mut idx = vec![0usize; spec.num_phases];
        for lf in &frames {
            let dir = out.dir.join(name).join(format!("class_{:02}", lf.phase));
            write_pgm(&dir.join(format!("{:05}.pgm", idx[lf.phase])), &lf.frame)?;
            idx[lf.phase] += 1;
        }
        for (c, n) in idx.iter().enumerate() {
            let _ = writeln!(csv, "{name},{c},{n}");
        }
        progress(format!("wrote {} {name} frames", frames.len()));
    }
    out.write("metrics.csv", &csv)
}

fn pretrain_generic(cfg: &RunConfig, out: &Output) -> Result<Checkpoint> {
    let data = pipeline::generic_data(cfg)?;
    progress(format!("generic pretraining on {} frames", data.frames.len()));
    let (state, losses) = pipeline::pretrain_generic(cfg, &data.frames, log_loss("generic", cfg.steps))?;
    let ckpt = pipeline::moco_checkpoint(&state);
    out.write("metrics.csv", &loss_csv(&losses))?;
    out.checkpoint("generic", &ckpt)?;
    Ok(ckpt)
}

fn adapt_teacher(cfg: &RunConfig, generic: &Checkpoint, out: &Output) -> Result<Checkpoint> {
    let data = pipeline::target_data(cfg)?;
    progress(format!("teacher adaptation on {} frames (backbone frozen: {})", data.frames.len(), cfg.freeze_backbone));
    let (t, losses) = pipeline::adapt_teacher(cfg, generic, &data.frames, log_loss("teacher", cfg.steps))?;
    let ckpt = pipeline::moco_checkpoint(&t.moco);
    out.write("metrics.csv", &loss_csv(&losses))?;
    out.checkpoint("teacher", &ckpt)?;
    Ok(ckpt)
}

fn student_arm(cfg: &RunConfig) -> StudentArm {
    if cfg.distill {
        StudentArm::Distill
    } else if cfg.init_from_teacher {
        StudentArm::Init
    } else {
        StudentArm::Plain
    }
}

fn pretrain_student(cfg: &RunConfig, teacher: Option<&Checkpoint>, out: &Output) -> Result<Checkpoint> {
    let data = pipeline::target_data(cfg)?;
    let arm = student_arm(cfg);
    progress(format!("student pretraining ({arm:?}) on {} frames", data.frames.len()));
    let (s, losses) = pipeline::pretrain_student(cfg, arm, teacher, &data.frames, log_step("student", cfg.steps))?;
    let ckpt = pipeline::moco_checkpoint(&s);
    out.write("metrics.csv", &step_csv(&losses))?;
    out.checkpoint("student", &ckpt)?;
    Ok(ckpt)
}

fn probe_csv(mode: FeatureMode, fraction: f64, runs: &[pipeline::ProbeRun]) -> String {
    let mut s = String::from("mode,fraction,seed,accuracy,precision,recall,jaccard\n");
    for r in runs {
        let _ = writeln!(s, "{mode},{fraction},{},{},{},{},{}", r.seed, r.accuracy, r.precision, r.recall, r.jaccard);
    }
    s
}

fn optional_encoder(cfg: &RunConfig, p: &Option<PathBuf>) -> Result<Option<crate::encoder::EncoderParams>> {
    p.as_ref()
        .map(|p| pipeline::load_encoder(&stem(p), "query", &cfg.encoder()))
        .transpose()
}

fn linear_probe(cfg: &RunConfig, out: &Output) -> Result<()> {
    let student = optional_encoder(cfg, &cfg.student_ckpt)?;
    let teacher = optional_encoder(cfg, &cfg.teacher_ckpt)?;
    let enc = pipeline::sweep_encoder(cfg.mode.as_str(), cfg.mode, student.as_ref(), teacher.as_ref());
    let data = pipeline::target_data(cfg)?;
    let runs = pipeline::probe_runs(cfg, &enc, &data, cfg.label_fraction)?;
    progress(format!(
        "{} probe at fraction {}: mean accuracy {:.4}",
        cfg.mode,
        cfg.label_fraction,
        pipeline::mean_accuracy(&runs)
    ));
    out.write("metrics.csv", &probe_csv(cfg.mode, cfg.label_fraction, &runs))
}

fn sweep_labels(cfg: &RunConfig, out: &Output) -> Result<()> {
    let student = optional_encoder(cfg, &cfg.student_ckpt)?;
    let teacher = optional_encoder(cfg, &cfg.teacher_ckpt)?;
    let modes: Vec<FeatureMode> = FeatureMode::ALL
        .into_iter()
        .filter(|m| (!m.needs_student() || student.is_some()) && (!m.needs_teacher() || teacher.is_some()))
        .collect();
    if modes.is_empty() {
        return Err(Error::Config("sweep-labels needs --student-ckpt and/or --teacher-ckpt".into()));
    }
    let encoders: Vec<_> = modes
        .iter()
        .map(|&m| pipeline::sweep_encoder(m.as_str(), m, student.as_ref(), teacher.as_ref()))
        .collect();
    let data = pipeline::target_data(cfg)?;
    let res = pipeline::sweep(cfg, &encoders, &data)?;
    for s in &res.summary {
        progress(format!(
            "{} fraction {}: accuracy {:.4} ± {:.4}",
            s.encoder, s.fraction, s.accuracy_mean, s.accuracy_std
        ));
    }
    out.write("metrics.csv", &res.to_csv())?;
    out.write("summary.json", &(res.summary_json()? + "\n"))?;
    out.write("accuracy.svg", &accuracy_chart_svg(&res))
}

fn gradcheck(cfg: &RunConfig, out: &Output) -> Result<bool> {
    let t = Instant::now();
    let rows = run_gradcheck_suite(cfg.gradcheck_instances, cfg.seed)?;
    let report = format_report(&rows);
    eprint!("{report}");
    progress(format!("gradcheck finished in {:.1}s", t.elapsed().as_secs_f64()));
    let mut csv = String::from("op,instances,redraws,max_rel_error,passed\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{},{}", r.name, r.instances, r.redraws, r.max_rel_error, r.passed());
    }
    out.write("metrics.csv", &csv)?;
    out.write("report.txt", &report)?;
    Ok(rows.iter().all(|r| r.passed()))
}

fn teacher_for_ablation(cfg: &RunConfig, out: &Output) -> Result<Checkpoint> {
    if cfg.teacher_ckpt.is_some() {
        return load_ckpt(&cfg.teacher_ckpt, "teacher checkpoint");
    }
    let generic = match &cfg.generic_ckpt {
        Some(_) => load_ckpt(&cfg.generic_ckpt, "generic checkpoint")?,
        None => {
            let data = pipeline::generic_data(cfg)?;
            let (s, _) = pipeline::pretrain_generic(cfg, &data.frames, log_loss("generic", cfg.steps))?;
            let c = pipeline::moco_checkpoint(&s);
            out.checkpoint("generic", &c)?;
            c
        }
    };
    let data = pipeline::target_data(cfg)?;
    let (t, _) = pipeline::adapt_teacher(cfg, &generic, &data.frames, log_loss("teacher", cfg.steps))?;
    let c = pipeline::moco_checkpoint(&t.moco);
    out.checkpoint("teacher", &c)?;
    Ok(c)
}

fn ablate_transfer(cfg: &RunConfig, out: &Output) -> Result<()> {
    let teacher = teacher_for_ablation(cfg, out)?;
    let data = pipeline::target_data(cfg)?;
    let steps = cfg.steps;
    let show = every((steps / 5).max(1));
    let models = pipeline::train_ablation_models(cfg, &teacher, &data.frames, |arm, k, l| {
        if show(k) {
            progress(format!("student[{arm}] step {k}/{steps} total {:.4}", l.total));
        }
    })?;
    for (name, c) in &models.checkpoints {
        out.checkpoint(name, c)?;
    }
    let rows = pipeline::transfer_ablation(cfg, &models, &data)?;
    for r in &rows {
        progress(format!("{:<15} accuracy {:.4}", r.arm, r.mean(|p| p.accuracy)));
    }
    let csv = pipeline::ablation_csv(&rows);
    out.write("metrics.csv", &csv)?;
    out.write("transfer_ablation.csv", &csv)
}

fn full_pipeline(cfg: &RunConfig, out: &Output) -> Result<()> {
    let t = Instant::now();
    let generic = {
        let data = pipeline::generic_data(cfg)?;
        let (s, l) = pipeline::pretrain_generic(cfg, &data.frames, log_loss("generic", cfg.steps))?;
        out.write("generic_losses.csv", &loss_csv(&l))?;
        let c = pipeline::moco_checkpoint(&s);
        out.checkpoint("generic", &c)?;
        c
    };
    let data = pipeline::target_data(cfg)?;
    let (t_state, l) = pipeline::adapt_teacher(cfg, &generic, &data.frames, log_loss("teacher", cfg.steps))?;
    out.write("teacher_losses.csv", &loss_csv(&l))?;
    let teacher = pipeline::moco_checkpoint(&t_state.moco);
    out.checkpoint("teacher", &teacher)?;
    let (s, l) = pipeline::pretrain_student(cfg, StudentArm::Distill, Some(&teacher), &data.frames, log_step("student", cfg.steps))?;
    out.write("student_losses.csv", &step_csv(&l))?;
    out.checkpoint("student", &pipeline::moco_checkpoint(&s))?;
    let enc = pipeline::sweep_encoder("student", FeatureMode::Student, Some(&s.query), None);
    let runs = pipeline::probe_runs(cfg, &enc, &data, cfg.label_fraction)?;
    progress(format!(
        "distilled student probe at fraction {}: mean accuracy {:.4} ({:.1}s total)",
        cfg.label_fraction,
        pipeline::mean_accuracy(&runs),
        t.elapsed().as_secs_f64()
    ));
    out.write("metrics.csv", &probe_csv(FeatureMode::Student, cfg.label_fraction, &runs))
}

fn dispatch(cmd: Command) -> Result<bool> {
    let (common, name) = match &cmd {
        Command::GenData(c) => (c, "gen-data"),
        Command::PretrainGeneric(c) => (c, "pretrain-generic"),
        Command::AdaptTeacher(c) => (c, "adapt-teacher"),
        Command::PretrainStudent(c) => (c, "pretrain-student"),
        Command::LinearProbe(c) => (c, "linear-probe"),
        Command::SweepLabels(c) => (c, "sweep-labels"),
        Command::Gradcheck(c) => (c, "gradcheck"),
        Command::AblateTransfer(c) => (c, "ablate-transfer"),
        Command::Pipeline(c) => (c, "pipeline"),
    };
    let cfg = common.resolve()?;
    let out = Output::create(&cfg)?;
    progress(format!("{name}: writing to {}", cfg.out.display()));
    match cmd {
        Command::GenData(_) => gen_data(&cfg, &out)?,
        Command::PretrainGeneric(_) => {
            pretrain_generic(&cfg, &out)?;
        }
        Command::AdaptTeacher(_) => {
            let generic = load_ckpt(&cfg.generic_ckpt, "generic checkpoint (--generic-ckpt)")?;
            adapt_teacher(&cfg, &generic, &out)?;
        }
        Command::PretrainStudent(_) => {
            let teacher = match student_arm(&cfg) {
                StudentArm::Plain => None,
                _ => Some(load_ckpt(&cfg.teacher_ckpt, "teacher checkpoint (--teacher-ckpt)")?),
            };
            pretrain_student(&cfg, teacher.as_ref(), &out)?;
        }
        Command::LinearProbe(_) => linear_probe(&cfg, &out)?,
        Command::SweepLabels(_) => sweep_labels(&cfg, &out)?,
        Command::Gradcheck(_) => return gradcheck(&cfg, &out),
        Command::AblateTransfer(_) => ablate_transfer(&cfg, &out)?,
        Command::Pipeline(_) => full_pipeline(&cfg, &out)?,
    }
    Ok(true)
}

/// Parses `argv` (program name first) and runs the command; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            // help and version go to stdout, errors with usage to stderr
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(true) => 0,
        Ok(false) => {
            progress("gradient check failed");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
