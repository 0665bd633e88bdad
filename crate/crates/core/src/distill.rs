//! Teacher adaptation with a frozen backbone, and distilled student training.
//!
//! The teacher and student each keep a key queue. During distilled training
//! both queues are pushed with keys of the same augmented samples in the same
//! step, so slot `i` of either queue always refers to one raw sample and the
//! two similarity distributions are index-aligned.

use crate::augment::Frame;
use crate::contrastive::{batch_views, encode_batch, sample_batch, KeyQueue, MoCoState, TrainConfig};
use crate::data::checkpoint::Checkpoint;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ops, Graph, Tensor};

/// Probability vector over `{positive key, queue keys}`; index 0 is the positive.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityDistribution {
    probs: Vec<f64>,
}

impl SimilarityDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!(
                "not a probability vector (len {}, sum {sum})",
                probs.len()
            )));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Tempered softmax over `[sim(q,k₊), sim(q,k₁), …, sim(q,k_M)]` per row, as a `B×(M+1)` tensor.
pub fn similarity_probs(q: &Tensor, k_plus: &Tensor, queue: &KeyQueue, tau: f64) -> Result<Tensor> {
    let sims = ops::similarity_logits(q, k_plus, queue.rows())?;
    ops::softmax_with_temperature(&sims, tau)
}

/// Teacher soft targets, one distribution per query row. No gradients.
pub fn soft_targets(
    q_t: &Tensor,
    k_t_plus: &Tensor,
    teacher_queue: &KeyQueue,
    tau: f64,
) -> Result<Vec<SimilarityDistribution>> {
    let p = similarity_probs(q_t, k_t_plus, teacher_queue, tau)?;
    (0..p.rows())
        .map(|r| SimilarityDistribution::new(p.row(r).to_vec()))
        .collect()
}

/// Batch mean of `Σ_i p_t[i]·ln(p_t[i]/p_s[i])`, with `0·ln(0/x) = 0`.
pub fn kl_distillation_loss(p_t: &[SimilarityDistribution], p_s: &[SimilarityDistribution]) -> Result<f64> {
    if p_t.len() != p_s.len() || p_t.is_empty() {
        return Err(Error::Contract(format!(
            "batch size mismatch: {} teacher vs {} student distributions",
            p_t.len(),
            p_s.len()
        )));
    }
    let mut total = 0.0;
    for (t, s) in p_t.iter().zip(p_s) {
        if t.len() != s.len() {
            return Err(Error::Contract(format!(
                "distribution length mismatch: {} vs {}",
                t.len(),
                s.len()
            )));
        }
        total += t
            .probs
            .iter()
            .zip(&s.probs)
            .filter(|(pt, _)| **pt > 0.0)
            .map(|(pt, ps)| pt * (pt / ps).ln())
            .sum::<f64>();
    }
    Ok(total / p_t.len() as f64)
}

/// Teacher encoders: backbone frozen on both sides, head adapted contrastively.
#[derive(Debug, Clone)]
pub struct TeacherState {
    pub moco: MoCoState,
}

impl TeacherState {
    pub fn query(&self) -> &EncoderParams {
        &self.moco.query
    }

    pub fn key(&self) -> &EncoderParams {
        &self.moco.key
    }

    pub fn queue(&self) -> &KeyQueue {
        &self.moco.queue
    }

    pub fn is_frozen(&self) -> bool {
        self.moco.query.backbone_frozen() && self.moco.key.backbone_frozen()
    }

    /// Clears the teacher queue so it can be re-warmed alongside a student.
    pub fn reset_queue(&mut self) {
        self.moco.queue = KeyQueue::new(self.moco.cfg.queue_size, self.moco.query.config.d_embed);
    }

    /// Contrastive step on the teacher; only the head moves when frozen.
    pub fn adapt_step(&mut self, batch: &[Frame], rng: &mut Rng) -> Result<f64> {
        self.moco.train_step(batch, rng)
    }
}

/// Loads query and key encoders from the `query` group of a generic-domain
/// checkpoint and optionally freezes both backbones. The queue starts empty.
pub fn init_teacher(
    ckpt: &Checkpoint,
    arch: &EncoderConfig,
    cfg: TrainConfig,
    freeze_backbone: bool,
) -> Result<TeacherState> {
    let enc = ckpt.encoder("query", arch)?;
    let mut moco = MoCoState::new(enc, cfg)?;
    moco.query.freeze_backbone(freeze_backbone);
    moco.key.freeze_backbone(freeze_backbone);
    Ok(TeacherState { moco })
}

/// `teacher_adapt_step`: one semantic-preserving update of the teacher.
pub fn teacher_adapt_step(teacher: &mut TeacherState, batch: &[Frame], rng: &mut Rng) -> Result<f64> {
    teacher.adapt_step(batch, rng)
}

/// Losses reported by one distilled step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub contrastive: f64,
    pub distill: f64,
    pub total: f64,
}

fn check_sync(student: &MoCoState, teacher: &TeacherState) -> Result<()> {
    if student.queue.ptr() != teacher.queue().ptr()
        || student.queue.filled() != teacher.queue().filled()
        || student.queue.capacity() != teacher.queue().capacity()
    {
        return Err(Error::Contract(format!(
            "queue desynchronization: student ptr {} / filled {}, teacher ptr {} / filled {}",
            student.queue.ptr(),
            student.queue.filled(),
            teacher.queue().ptr(),
            teacher.queue().filled()
        )));
    }
    Ok(())
}

/// Fills both queues from one stream of augmented samples.
pub fn warm_up_pair(student: &mut MoCoState, teacher: &mut TeacherState, data: &[Frame], rng: &mut Rng) -> Result<()> {
    let n = student.cfg.batch_size;
    let batches = student.cfg.queue_size / n;
    for _ in 0..batches {
        let batch = sample_batch(data, n, rng)?;
        let (_, xk) = batch_views(&batch, &student.cfg.augment, rng)?;
        let ks = encode_batch(&student.key, xk.clone())?;
        let kt = encode_batch(&teacher.moco.key, xk)?;
        student.queue.push(&ks)?;
        teacher.moco.queue.push(&kt)?;
    }
    Ok(())
}

/// One step of `L = L_con + λ·L_dis` on the student.
///
/// Both models see the same two views. Only the student query encoder
/// receives gradients; the teacher is read-only apart from its queue.
pub fn distilled_train_step(
    student: &mut MoCoState,
    teacher: &mut TeacherState,
    batch: &[Frame],
    rng: &mut Rng,
) -> Result<StepLosses> {
    check_sync(student, teacher)?;
    if batch.len() != student.cfg.batch_size {
        return Err(Error::Contract(format!(
            "batch has {} frames, configured batch size is {}",
            batch.len(),
            student.cfg.batch_size
        )));
    }
    if !student.queue.is_full() {
        return Err(Error::Contract("queues must be warmed before distilled training".into()));
    }
    let cfg = student.cfg;
    let tau_d = cfg.distill_temperature();

    let (xq, xk) = batch_views(batch, &cfg.augment, rng)?;
    let k_s = encode_batch(&student.key, xk.clone())?;
    let q_t = encode_batch(&teacher.moco.query, xq.clone())?;
    let k_t = encode_batch(&teacher.moco.key, xk)?;
    let p_t = similarity_probs(&q_t, &k_t, teacher.queue(), tau_d)?;

    let mut g = Graph::new();
    let x = g.constant(xq);
    let q_s = student.query.forward(&mut g, x, true)?;
    let sims = g.similarity(q_s.embedding, &k_s, student.queue.rows())?;
    let logp = g.log_softmax(sims, cfg.tau)?;
    let l_con = g.nll_first_mean(logp)?;
    let logp_d = if tau_d == cfg.tau { logp } else { g.log_softmax(sims, tau_d)? };
    let l_dis = g.kl_rows_mean(logp_d, &p_t)?;
    let weighted = g.scale(l_dis, cfg.lambda);
    let total = g.add(l_con, weighted)?;

    let losses = StepLosses {
        contrastive: g.value(l_con).item()?,
        distill: g.value(l_dis).item()?,
        total: g.value(total).item()?,
    };
    let grads = g.backward(total)?;
    student.apply(&grads, k_s)?;
    teacher.moco.queue.push(&k_t)?;
    Ok(losses)
}

/// Re-warms both queues together, then runs `cfg.steps` distilled steps.
pub fn distill_fit(
    student: &mut MoCoState,
    teacher: &mut TeacherState,
    data: &[Frame],
    rng: &mut Rng,
    mut on_step: impl FnMut(u64, &StepLosses),
) -> Result<Vec<StepLosses>> {
    teacher.reset_queue();
    student.queue = KeyQueue::new(student.cfg.queue_size, student.query.config.d_embed);
    warm_up_pair(student, teacher, data, rng)?;
    let mut out = Vec::with_capacity(student.cfg.steps);
    for _ in 0..student.cfg.steps {
        let batch = sample_batch(data, student.cfg.batch_size, rng)?;
        let l = distilled_train_step(student, teacher, &batch, rng)?;
        on_step(student.step_count, &l);
        out.push(l);
    }
    Ok(out)
}
