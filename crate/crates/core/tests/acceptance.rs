//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line to
//! stderr; the test fails at the end if any criterion failed.

mod common;

use std::io::Write;
use std::time::Instant;

use common::{chain, small_config, snapshot};
use distill_ssl::config::RunConfig;
use distill_ssl::contrastive::{info_nce_loss, momentum_update, sample_batch, KeyQueue, MoCoState};
use distill_ssl::data::{load_checkpoint, save_checkpoint, Checkpoint};
use distill_ssl::distill::{distill_fit, distilled_train_step, init_teacher, kl_distillation_loss, warm_up_pair, SimilarityDistribution, TeacherState};
use distill_ssl::encoder::EncoderParams;
use distill_ssl::eval::FeatureMode;
use distill_ssl::gradcheck_suite::{format_report, run_gradcheck_suite, TOLERANCE};
use distill_ssl::pipeline::{self, StudentArm};
use distill_ssl::rng::Rng;
use distill_ssl::tensor::Tensor;

type Outcome = Result<(bool, String), String>;

fn report(results: &mut Vec<(usize, bool)>, id: usize, name: &str, outcome: Outcome) {
    let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    let line = format!("[acceptance] criterion {id:>2} {:<32} {}  {detail}\n", name, if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    results.push((id, ok));
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let rows = run_gradcheck_suite(100, 2024).map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    let _ = std::io::stderr().write_all(format_report(&rows).as_bytes());
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let enough = rows.iter().all(|r| r.instances >= 100);
    let ok = rows.iter().all(|r| r.passed()) && enough && worst <= TOLERANCE && secs < 120.0;
    Ok((ok, format!("{} checks, worst rel err {worst:.2e}, {secs:.1}s", rows.len())))
}

fn unit_queue(rows: &[Vec<f64>]) -> KeyQueue {
    let mut q = KeyQueue::new(rows.len(), rows[0].len());
    for r in rows {
        q.push(&Tensor::from_rows(std::slice::from_ref(r)).unwrap()).unwrap();
    }
    q
}

fn closed_form_info_nce() -> Outcome {
    let mut worst: f64 = 0.0;
    for m in [1usize, 2, 8] {
        let basis = |i: usize| (0..=m).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let q = Tensor::from_rows(&[basis(0)]).unwrap();

        let uniform = unit_queue(&vec![basis(0); m]);
        let l = info_nce_loss(&q, &q, &uniform, 0.07).map_err(err)?;
        worst = worst.max((l - ((m + 1) as f64).ln()).abs());

        let orth = unit_queue(&(1..=m).map(basis).collect::<Vec<_>>());
        let l = info_nce_loss(&q, &q, &orth, 1.0).map_err(err)?;
        worst = worst.max((l - (1.0 + m as f64 / std::f64::consts::E).ln()).abs());
    }
    Ok((worst <= 1e-12, format!("max deviation {worst:.1e} over M in {{1,2,8}}")))
}

fn random_distribution(rng: &mut Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.uniform() + 1e-3).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn kl_properties() -> Outcome {
    let d = |p: Vec<f64>| SimilarityDistribution::new(p).unwrap();
    let mut rng = Rng::new(31);
    let (mut min_kl, mut max_self): (f64, f64) = (f64::INFINITY, 0.0);
    for _ in 0..10_000 {
        let n = 2 + rng.below(15);
        let (p, q) = (random_distribution(&mut rng, n), random_distribution(&mut rng, n));
        min_kl = min_kl.min(kl_distillation_loss(&[d(p.clone())], &[d(q)]).map_err(err)?);
        max_self = max_self.max(kl_distillation_loss(&[d(p.clone())], &[d(p)]).map_err(err)?.abs());
    }
    let hand = kl_distillation_loss(&[d(vec![0.5, 0.5])], &[d(vec![0.25, 0.75])]).map_err(err)?;
    let ok = min_kl > 1e-12 && max_self <= 1e-12 && (hand - 0.14384).abs() <= 1e-5;
    Ok((ok, format!("min KL(p,q) {min_kl:.2e}, max KL(p,p) {max_self:.1e}, hand case {hand:.6}")))
}

fn momentum_and_queue() -> Outcome {
    let arch = RunConfig::default().encoder();
    let query = EncoderParams::init(arch, &mut Rng::new(1)).map_err(err)?;
    let key0 = EncoderParams::init(arch, &mut Rng::new(2)).map_err(err)?;
    let mut k1 = key0.clone();
    momentum_update(&mut k1, &query, 1.0).map_err(err)?;
    let mut k0 = key0.clone();
    momentum_update(&mut k0, &query, 0.0).map_err(err)?;
    let bitwise = k1.bitwise_eq(&key0) && k0.bitwise_eq(&query);

    let mut rng = Rng::new(17);
    let mut fifo_ok = true;
    for _ in 0..1_000 {
        let n = 1 + rng.below(4);
        let cap = n * (1 + rng.below(5));
        let pushes = 1 + rng.below(20);
        let mut queue = KeyQueue::new(cap, 2);
        // reference: slots hold keys in arrival order, oldest evicted first
        let mut slots: Vec<Option<u64>> = vec![None; cap];
        let mut fifo: std::collections::VecDeque<usize> = (0..cap).collect();
        let mut id = 0u64;
        for k in 1..=pushes {
            let mut rows = Vec::new();
            for _ in 0..n {
                let a = id as f64 * 0.01;
                rows.push(vec![a.cos(), a.sin()]);
                let slot = fifo.pop_front().unwrap();
                slots[slot] = Some(id);
                fifo.push_back(slot);
                id += 1;
            }
            queue.push(&Tensor::from_rows(&rows).unwrap()).map_err(err)?;
            fifo_ok &= queue.ptr() == (k * n) % cap;
        }
        for (s, entry) in slots.iter().enumerate() {
            let row = queue.rows().row(s);
            fifo_ok &= match entry {
                Some(id) => {
                    let a = *id as f64 * 0.01;
                    row[0] == a.cos() && row[1] == a.sin()
                }
                None => row.iter().all(|&v| v == 0.0),
            };
        }
    }
    Ok((bitwise && fifo_ok, format!("m=1/m=0 bitwise {bitwise}, 1000 push sequences match FIFO {fifo_ok}")))
}

fn default_target() -> (RunConfig, Vec<distill_ssl::augment::Frame>) {
    let cfg = RunConfig::default();
    let data = pipeline::target_data(&cfg).unwrap();
    (cfg, data.frames)
}

fn freeze_semantics() -> Outcome {
    let (cfg, frames) = default_target();
    let mut train = cfg.train();
    train.steps = 100;
    let generic = EncoderParams::init(cfg.encoder(), &mut Rng::new(40)).map_err(err)?;
    let ckpt = Checkpoint::new(cfg.encoder()).with_encoder("query", &generic);

    let mut t = init_teacher(&ckpt, &cfg.encoder(), train, true).map_err(err)?;
    t.moco.fit(&frames, &mut Rng::new(41), |_, _| {}).map_err(err)?;
    let backbone_same = t.moco.query.backbone.values_bitwise_eq(&generic.backbone)
        && t.moco.key.backbone.values_bitwise_eq(&generic.backbone);
    let head_moved = !t.moco.query.head.values_bitwise_eq(&generic.head);

    let mut unfrozen = init_teacher(&ckpt, &cfg.encoder(), train, false).map_err(err)?;
    let mut plain = MoCoState::new(generic.clone(), train).map_err(err)?;
    let lu = unfrozen.moco.fit(&frames, &mut Rng::new(42), |_, _| {}).map_err(err)?;
    let lp = plain.fit(&frames, &mut Rng::new(42), |_, _| {}).map_err(err)?;
    let reproduces = lu == lp && unfrozen.moco.query.bitwise_eq(&plain.query) && unfrozen.moco.key.bitwise_eq(&plain.key);
    Ok((
        backbone_same && head_moved && reproduces,
        format!("backbone unchanged {backbone_same}, head changed {head_moved}, unfrozen == plain {reproduces}"),
    ))
}

fn frozen_copy(s: &MoCoState) -> TeacherState {
    let mut moco = s.clone();
    moco.query.freeze_backbone(true);
    moco.key.freeze_backbone(true);
    TeacherState { moco }
}

fn lambda_zero_equivalence() -> Outcome {
    let (cfg, frames) = default_target();
    let mut train = cfg.train();
    train.steps = 50;
    train.lambda = 0.0;
    let enc = EncoderParams::init(cfg.encoder(), &mut Rng::new(50)).map_err(err)?;
    let other = EncoderParams::init(cfg.encoder(), &mut Rng::new(51)).map_err(err)?;
    let mut plain = MoCoState::new(enc.clone(), train).map_err(err)?;
    let mut student = MoCoState::new(enc, train).map_err(err)?;
    let mut teacher = frozen_copy(&MoCoState::new(other, train).map_err(err)?);
    let lp = plain.fit(&frames, &mut Rng::new(52), |_, _| {}).map_err(err)?;
    let ld = distill_fit(&mut student, &mut teacher, &frames, &mut Rng::new(52), |_, _| {}).map_err(err)?;
    let losses_same = lp.len() == 50 && lp.iter().zip(&ld).all(|(a, b)| a.to_bits() == b.total.to_bits());
    let params_same = plain.query.bitwise_eq(&student.query)
        && plain.key.bitwise_eq(&student.key)
        && plain.queue.rows().bitwise_eq(student.queue.rows());
    Ok((losses_same && params_same, format!("50 losses bitwise {losses_same}, encoders and queue bitwise {params_same}")))
}

fn self_teacher() -> Outcome {
    let (cfg, frames) = default_target();
    let train = cfg.train();
    let enc = EncoderParams::init(cfg.encoder(), &mut Rng::new(60)).map_err(err)?;
    let mut student = MoCoState::new(enc, train).map_err(err)?;
    let mut teacher = frozen_copy(&student);
    let mut rng = Rng::new(61);
    warm_up_pair(&mut student, &mut teacher, &frames, &mut rng).map_err(err)?;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        teacher = frozen_copy(&student);
        let batch = sample_batch(&frames, train.batch_size, &mut rng).map_err(err)?;
        let l = distilled_train_step(&mut student, &mut teacher, &batch, &mut rng).map_err(err)?;
        worst = worst.max(l.distill.abs());
    }
    Ok((worst < 1e-10, format!("max L_dis over 20 steps {worst:.1e}")))
}

/// Models from the first end-to-end seed, reused by later criteria.
struct Trained {
    cfg: RunConfig,
    target: pipeline::Dataset,
    checkpoints: Vec<(String, Checkpoint)>,
    teacher: Checkpoint,
    student: MoCoState,
}

fn end_to_end(first: &mut Option<Trained>) -> Outcome {
    let mut lines = Vec::new();
    let (mut ok, mut accs) = (true, Vec::new());
    for seed in 0..3u64 {
        let cfg = RunConfig { seed, ..RunConfig::default() };
        let t = Instant::now();
        let generic_data = pipeline::generic_data(&cfg).map_err(err)?;
        let (g, gl) = pipeline::pretrain_generic(&cfg, &generic_data.frames, |_, _| {}).map_err(err)?;
        let generic = pipeline::moco_checkpoint(&g);
        let target = pipeline::target_data(&cfg).map_err(err)?;
        let (teacher_state, _) = pipeline::adapt_teacher(&cfg, &generic, &target.frames, |_, _| {}).map_err(err)?;
        let teacher = pipeline::moco_checkpoint(&teacher_state.moco);
        let (student, sl) =
            pipeline::pretrain_student(&cfg, StudentArm::Distill, Some(&teacher), &target.frames, |_, _| {}).map_err(err)?;
        let enc = pipeline::sweep_encoder("student", FeatureMode::Student, Some(&student.query), None);
        let runs = pipeline::probe_runs(&cfg, &enc, &target, 0.1).map_err(err)?;
        let secs = t.elapsed().as_secs_f64();

        let (g0, g1) = pipeline::loss_endpoints(&gl, 20);
        let con: Vec<f64> = sl.iter().map(|l| l.contrastive).collect();
        let (s0, s1) = pipeline::loss_endpoints(&con, 20);
        let acc = pipeline::mean_accuracy(&runs);
        accs.push(acc);
        ok &= secs <= 600.0 && g1 < 0.6 * g0 && s1 < 0.6 * s0;
        lines.push(format!(
            "seed {seed}: {secs:.0}s, generic loss {g0:.3}->{g1:.3} ({:.0}%), student L_con {s0:.3}->{s1:.3} ({:.0}%), probe {acc:.3}",
            100.0 * g1 / g0,
            100.0 * s1 / s0
        ));
        if seed == 0 {
            *first = Some(Trained {
                checkpoints: vec![("generic".into(), generic), ("teacher".into(), teacher.clone()), ("student".into(), pipeline::moco_checkpoint(&student))],
                cfg: cfg.clone(),
                target,
                teacher,
                student,
            });
        }
    }
    let mean_acc = accs.iter().sum::<f64>() / accs.len() as f64;
    ok &= mean_acc >= 0.375;
    Ok((ok, format!("mean probe accuracy {mean_acc:.3}; {}", lines.join("; "))))
}

fn label_efficiency(t: &Trained) -> Outcome {
    let teacher = t.teacher.encoder("query", &t.cfg.encoder()).map_err(err)?;
    let encoders: Vec<_> = [FeatureMode::Student, FeatureMode::Teacher, FeatureMode::Addition, FeatureMode::Concatenation]
        .into_iter()
        .map(|m| pipeline::sweep_encoder(&m.to_string(), m, Some(&t.student.query), Some(&teacher)))
        .collect();
    let result = pipeline::sweep(&t.cfg, &encoders, &t.target).map_err(err)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for e in &encoders {
        let curve = result.curve(&e.name);
        let accs: Vec<f64> = curve.iter().map(|s| s.accuracy_mean).collect();
        ok &= curve.len() == 4 && curve.iter().all(|s| s.runs == 3);
        ok &= accs.windows(2).all(|w| w[1] >= w[0] - 0.02);
        parts.push(format!("{} [{}]", e.name, accs.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ")));
    }
    Ok((ok, parts.join(", ")))
}

fn transfer_ablation(t: &mut Trained) -> Outcome {
    let models = pipeline::train_ablation_models(&t.cfg, &t.teacher, &t.target.frames, |_, _, _| {}).map_err(err)?;
    let rows = pipeline::transfer_ablation(&t.cfg, &models, &t.target).map_err(err)?;
    let csv = pipeline::ablation_csv(&rows);
    let arms: Vec<&str> = rows.iter().map(|r| r.arm.as_str()).collect();
    let dir = tempfile::tempdir().map_err(err)?;
    std::fs::write(dir.path().join("transfer_ablation.csv"), &csv).map_err(err)?;
    let lines = csv.lines().count();
    let ok = arms == ["addition", "concatenation", "initialization", "distillation"]
        && lines == 1 + 4 * t.cfg.probe_seeds.len()
        && csv.lines().skip(1).all(|l| l.split(',').count() == 8);
    t.checkpoints.extend(models.checkpoints);
    let means: Vec<String> = rows.iter().map(|r| format!("{} {:.3}", r.arm, r.mean(|p| p.accuracy))).collect();
    Ok((ok, format!("{} csv rows; {}", lines - 1, means.join(", "))))
}

fn persistence(t: &Trained) -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut round_trip = true;
    for (name, c) in &t.checkpoints {
        let stem = dir.path().join(name);
        save_checkpoint(c, &stem).map_err(err)?;
        round_trip &= load_checkpoint(&stem).map_err(err)?.bitwise_eq(c);
    }
    let cfg = small_config(dir.path());
    let a = chain(&dir.path().join("a"), &cfg);
    let b = chain(&dir.path().join("b"), &cfg);
    let mut identical = true;
    let mut files = 0;
    for (da, db) in a.iter().zip(&b) {
        let (sa, sb) = (snapshot(da), snapshot(db));
        files += sa.len();
        identical &= !sa.is_empty() && sa == sb;
    }
    Ok((
        round_trip && identical,
        format!(
            "{} trained checkpoints round-trip {round_trip}; {} commands, {files} output files identical {identical}",
            t.checkpoints.len(),
            a.len()
        ),
    ))
}

#[test]
fn acceptance_criteria() {
    let mut results = Vec::new();
    report(&mut results, 1, "gradient fidelity", gradient_fidelity());
    report(&mut results, 2, "closed-form InfoNCE", closed_form_info_nce());
    report(&mut results, 3, "KL properties", kl_properties());
    report(&mut results, 4, "momentum and queue invariants", momentum_and_queue());
    report(&mut results, 5, "semantic-preserving freeze", freeze_semantics());
    report(&mut results, 6, "lambda=0 equivalence", lambda_zero_equivalence());
    report(&mut results, 7, "self-teacher zero distillation", self_teacher());

    let mut trained = None;
    report(&mut results, 8, "desk-scale end-to-end", end_to_end(&mut trained));
    match trained.as_mut() {
        Some(t) => {
            report(&mut results, 9, "label-efficiency trend", label_efficiency(t));
            report(&mut results, 10, "transfer-mode ablation", transfer_ablation(t));
            report(&mut results, 11, "persistence", persistence(t));
        }
        None => {
            for (id, name) in [(9, "label-efficiency trend"), (10, "transfer-mode ablation"), (11, "persistence")] {
                report(&mut results, id, name, Err("end-to-end models unavailable".into()));
            }
        }
    }

    let failed: Vec<usize> = results.iter().filter(|(_, ok)| !ok).map(|(id, _)| *id).collect();
    let summary = format!("[acceptance] {}/{} criteria passed\n", results.len() - failed.len(), results.len());
    let _ = std::io::stderr().write_all(summary.as_bytes());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
