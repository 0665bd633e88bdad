use distill_ssl::contrastive::{info_nce_loss, KeyQueue};
use distill_ssl::distill::{kl_distillation_loss, SimilarityDistribution};
use distill_ssl::eval::{compute_phase_metrics, stratified_subset};
use distill_ssl::tensor::{ops, Tensor};
use proptest::prelude::*;

fn unit_rows(raw: &[Vec<f64>]) -> Tensor {
    let rows: Vec<Vec<f64>> = raw
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn direction() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 4).prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-2)
}

fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, len).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #[test]
    fn softmax_normalised_and_shift_invariant(
        z in prop::collection::vec(-20.0f64..20.0, 1..12),
        shift in -50.0f64..50.0,
        tau in 0.05f64..2.0,
    ) {
        let zt = Tensor::from_rows(std::slice::from_ref(&z)).unwrap();
        let p = ops::softmax_with_temperature(&zt, tau).unwrap();
        prop_assert!((p.sum() - 1.0).abs() < 1e-12);
        prop_assert!(p.data().iter().all(|&v| v >= 0.0));
        let shifted = Tensor::from_rows(&[z.iter().map(|v| v + shift).collect()]).unwrap();
        let ps = ops::softmax_with_temperature(&shifted, tau).unwrap();
        for (a, b) in p.data().iter().zip(ps.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]
    #[test]
    fn kl_non_negative_and_zero_only_on_equal(
        (p, q) in (2usize..10).prop_flat_map(|n| (distribution(n), distribution(n)))
    ) {
        let pd = SimilarityDistribution::new(p.clone()).unwrap();
        let qd = SimilarityDistribution::new(q.clone()).unwrap();
        let kl = kl_distillation_loss(std::slice::from_ref(&pd), &[qd]).unwrap();
        prop_assert!(kl >= -1e-15);
        let self_kl = kl_distillation_loss(std::slice::from_ref(&pd), std::slice::from_ref(&pd)).unwrap();
        prop_assert!(self_kl.abs() < 1e-15);
        let max_gap = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if max_gap > 1e-3 {
            prop_assert!(kl > 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1_000))]
    #[test]
    fn queue_matches_fifo_simulation(
        (n, k) in (1usize..5, 1usize..5),
        pushes in 1usize..20,
        seed_vals in prop::collection::vec(direction(), 20),
    ) {
        let cap = n * k;
        let mut q = KeyQueue::new(cap, 4);
        // reference: an unbounded log; the queue holds its last `cap` entries by slot
        let mut log: Vec<Vec<f64>> = Vec::new();
        for t in 0..pushes {
            let batch: Vec<Vec<f64>> = (0..n).map(|i| seed_vals[(t * n + i) % seed_vals.len()].clone()).collect();
            let keys = unit_rows(&batch);
            q.push(&keys).unwrap();
            for i in 0..n {
                log.push(keys.row(i).to_vec());
            }
            prop_assert_eq!(q.ptr(), ((t + 1) * n) % cap);
            prop_assert_eq!(q.filled(), log.len().min(cap));
        }
        for slot in 0..cap {
            let last = log.iter().enumerate().rfind(|(j, _)| j % cap == slot);
            match last {
                Some((_, row)) => prop_assert_eq!(q.rows().row(slot), row.as_slice()),
                None => prop_assert!(q.rows().row(slot).iter().all(|&v| v == 0.0)),
            }
        }
    }

    #[test]
    fn info_nce_invariant_to_queue_order(
        qs in prop::collection::vec(direction(), 2),
        ks in prop::collection::vec(direction(), 2),
        bank in prop::collection::vec(direction(), 6),
        rot in 1usize..6,
    ) {
        let (q, kp) = (unit_rows(&qs), unit_rows(&ks));
        let mut a = KeyQueue::new(6, 4);
        let mut b = KeyQueue::new(6, 4);
        let mut rotated = bank.clone();
        rotated.rotate_left(rot);
        rotated.swap(0, 5);
        for chunk in 0..3 {
            a.push(&unit_rows(&bank[chunk * 2..chunk * 2 + 2])).unwrap();
            b.push(&unit_rows(&rotated[chunk * 2..chunk * 2 + 2])).unwrap();
        }
        let la = info_nce_loss(&q, &kp, &a, 0.07).unwrap();
        let lb = info_nce_loss(&q, &kp, &b, 0.07).unwrap();
        prop_assert!((la - lb).abs() <= 1e-12 * la.abs().max(1.0));
    }

    #[test]
    fn metrics_relabel_invariant_and_jaccard_bounded(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = compute_phase_metrics(&preds, &labels, 4).unwrap();
        let pp: Vec<usize> = preds.iter().map(|&c| perm[c]).collect();
        let pl: Vec<usize> = labels.iter().map(|&c| perm[c]).collect();
        let r = compute_phase_metrics(&pp, &pl, 4).unwrap();
        prop_assert!((m.accuracy - r.accuracy).abs() < 1e-12);
        prop_assert!((m.precision - r.precision).abs() < 1e-12);
        prop_assert!((m.recall - r.recall).abs() < 1e-12);
        prop_assert!((m.jaccard - r.jaccard).abs() < 1e-12);
        for (c, cm) in m.per_class.iter().enumerate() {
            prop_assert_eq!(cm, &r.per_class[perm[c]]);
            prop_assert!(cm.jaccard <= cm.precision + 1e-15);
            prop_assert!(cm.jaccard <= cm.recall + 1e-15);
        }
    }

    #[test]
    fn stratified_subset_counts(
        counts in prop::collection::vec(1usize..40, 1..6),
        fraction in 0.01f64..=1.0,
        seed in any::<u64>(),
    ) {
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        let idx = stratified_subset(&labels, counts.len(), fraction, seed).unwrap();
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        for (c, &n) in counts.iter().enumerate() {
            let want = ((fraction * n as f64).ceil() as usize).clamp(1, n);
            let got = idx.iter().filter(|&&i| labels[i] == c).count();
            prop_assert_eq!(got, want);
        }
    }
}
