mod common;

use common::*;
use distill_ssl::contrastive::{sample_batch, KeyQueue, MoCoState, UNIT_NORM_TOL};
use distill_ssl::data::Checkpoint;
use distill_ssl::distill::{distill_fit, distilled_train_step, init_teacher, warm_up_pair};
use distill_ssl::eval::{extract_features, init_transfer, FeatureMode};
use distill_ssl::rng::Rng;

#[test]
fn moco_fifty_steps_reduce_loss() {
    let (frames, _) = toy_frames(16, 7);
    assert_eq!(frames.len(), 64);
    let mut s = fresh_state(7, small_train(50, 7));
    let losses = s.fit(&frames, &mut Rng::new(7), |_, _| {}).unwrap();
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[45..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "initial {head}, final {tail}");
}

#[test]
fn key_never_sees_gradients_and_queue_stays_unit_norm() {
    let (frames, _) = toy_frames(8, 1);
    let mut s = fresh_state(2, small_train(0, 0));
    let mut rng = Rng::new(3);
    s.warm_up(&frames, &mut rng).unwrap();
    for k in 1..=12u64 {
        let b = sample_batch(&frames, 8, &mut rng).unwrap();
        let old_key = s.key.clone();
        s.train_step(&b, &mut rng).unwrap();
        assert!(s.key.grads_all_zero());
        assert_eq!(s.queue.ptr() as u64, (k * 8) % 32);
        // key = m·old + (1−m)·new query, elementwise
        for ((name, kp), (_, op)) in s.key.all_params().zip(old_key.all_params()) {
            let qp = s.query.value(name).unwrap();
            for ((kv, ov), qv) in kp.value.data().iter().zip(op.value.data()).zip(qp.data()) {
                assert_eq!(*kv, 0.999 * ov + (1.0 - 0.999) * qv);
            }
        }
    }
    for r in 0..s.queue.capacity() {
        let n: f64 = s.queue.rows().row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < UNIT_NORM_TOL);
    }
}

#[test]
fn frozen_teacher_backbone_survives_adaptation() {
    let (frames, _) = toy_frames(8, 4);
    let generic = fresh_state(5, small_train(0, 0));
    let ckpt = Checkpoint::new(small_arch()).with_encoder("query", &generic.query);
    let mut t = init_teacher(&ckpt, &small_arch(), small_train(100, 0), true).unwrap();
    let before = t.moco.query.clone();
    t.moco.fit(&frames, &mut Rng::new(6), |_, _| {}).unwrap();
    assert!(t.is_frozen());
    assert!(t.moco.query.backbone.values_bitwise_eq(&before.backbone));
    assert!(t.moco.key.backbone.values_bitwise_eq(&before.backbone));
    assert!(!t.moco.query.head.values_bitwise_eq(&before.head));
}

#[test]
fn unfrozen_teacher_matches_plain_moco() {
    let (frames, _) = toy_frames(8, 4);
    let generic = fresh_state(5, small_train(0, 0));
    let ckpt = Checkpoint::new(small_arch()).with_encoder("query", &generic.query);
    let mut t = init_teacher(&ckpt, &small_arch(), small_train(30, 0), false).unwrap();
    let mut plain = MoCoState::new(generic.query.clone(), small_train(30, 0)).unwrap();
    let lt = t.moco.fit(&frames, &mut Rng::new(8), |_, _| {}).unwrap();
    let lp = plain.fit(&frames, &mut Rng::new(8), |_, _| {}).unwrap();
    assert_eq!(lt, lp);
    assert!(t.moco.query.bitwise_eq(&plain.query));
    assert!(t.moco.key.bitwise_eq(&plain.key));
}

#[test]
fn lambda_zero_matches_plain_moco_bitwise() {
    let (frames, _) = toy_frames(8, 9);
    let mut cfg = small_train(50, 0);
    cfg.lambda = 0.0;
    let mut plain = fresh_state(10, cfg);
    let mut student = fresh_state(10, cfg);
    let mut teacher = teacher_copy(&fresh_state(11, cfg));
    let lp = plain.fit(&frames, &mut Rng::new(12), |_, _| {}).unwrap();
    let ld = distill_fit(&mut student, &mut teacher, &frames, &mut Rng::new(12), |_, _| {}).unwrap();
    for (a, b) in lp.iter().zip(&ld) {
        assert_eq!(a.to_bits(), b.contrastive.to_bits());
        assert_eq!(a.to_bits(), b.total.to_bits());
    }
    assert!(plain.query.bitwise_eq(&student.query));
    assert!(plain.key.bitwise_eq(&student.key));
    assert!(plain.queue.rows().bitwise_eq(student.queue.rows()));
}

#[test]
fn self_teacher_has_zero_distillation() {
    let (frames, _) = toy_frames(8, 13);
    let cfg = small_train(20, 0);
    let mut student = fresh_state(14, cfg);
    let mut rng = Rng::new(15);
    let mut teacher = teacher_copy(&student);
    warm_up_pair(&mut student, &mut teacher, &frames, &mut rng).unwrap();
    for _ in 0..20 {
        teacher = teacher_copy(&student);
        let b = sample_batch(&frames, cfg.batch_size, &mut rng).unwrap();
        let l = distilled_train_step(&mut student, &mut teacher, &b, &mut rng).unwrap();
        assert!(l.distill.abs() < 1e-10, "{}", l.distill);
    }
}

#[test]
fn distilled_step_rejects_desynchronised_queues() {
    let (frames, _) = toy_frames(8, 13);
    let cfg = small_train(0, 0);
    let mut student = fresh_state(14, cfg);
    let mut teacher = teacher_copy(&student);
    let mut rng = Rng::new(1);
    warm_up_pair(&mut student, &mut teacher, &frames, &mut rng).unwrap();
    teacher.moco.queue = KeyQueue::new(cfg.queue_size, 8);
    let b = sample_batch(&frames, 8, &mut rng).unwrap();
    let err = distilled_train_step(&mut student, &mut teacher, &b, &mut rng).unwrap_err();
    assert!(err.to_string().contains("desynchron"), "{err}");
}

#[test]
fn init_transfer_copies_then_diverges() {
    let (frames, _) = toy_frames(8, 3);
    let teacher = fresh_state(20, small_train(0, 0));
    let ckpt = Checkpoint::new(small_arch()).with_encoder("query", &teacher.query);
    let mut s = init_transfer(&ckpt, &small_arch(), small_train(1, 0)).unwrap();
    assert!(s.query.bitwise_eq(&teacher.query));
    assert!(s.key.bitwise_eq(&teacher.query));
    let ft = extract_features(None, Some(&teacher.query), &frames, FeatureMode::Teacher).unwrap();
    let fs = extract_features(Some(&s.query), None, &frames, FeatureMode::Student).unwrap();
    assert!(ft.bitwise_eq(&fs));
    s.fit(&frames, &mut Rng::new(2), |_, _| {}).unwrap();
    assert!(!s.query.bitwise_eq(&teacher.query));
}
