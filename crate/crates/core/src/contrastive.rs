//! Momentum-contrastive training: query/key encoders, a FIFO key queue and
//! the InfoNCE objective.

use serde::{Deserialize, Serialize};

use crate::augment::{frames_to_batch, two_views, AugmentConfig, Frame};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{sgd_step, Graph, NodeId, ParamSet, SgdConfig, Tensor};

/// Maximum deviation from unit norm accepted for queued keys.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub tau: f64,
    pub m: f64,
    pub lambda: f64,
    /// Temperature for the distillation distributions; `None` reuses `tau`.
    pub distill_tau: Option<f64>,
    pub batch_size: usize,
    pub queue_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            m: 0.999,
            lambda: 5.0,
            distill_tau: None,
            batch_size: 32,
            queue_size: 256,
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
            steps: 500,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn distill_temperature(&self) -> f64 {
        self.distill_tau.unwrap_or(self.tau)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if let Some(t) = self.distill_tau {
            if !(t > 0.0) {
                return bad(format!("distill_tau must be positive, got {t}"));
            }
        }
        if !(0.0..1.0).contains(&self.m) {
            return bad(format!("m must lie in [0, 1), got {}", self.m));
        }
        if self.lambda < 0.0 {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.batch_size == 0 || self.queue_size == 0 {
            return bad("batch_size and queue_size must be positive".into());
        }
        if !self.queue_size.is_multiple_of(self.batch_size) {
            return bad(format!(
                "queue_size {} must be a multiple of batch_size {}",
                self.queue_size, self.batch_size
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.lr < 0.0 || self.weight_decay < 0.0 {
            return bad("optimizer settings out of range".into());
        }
        self.augment.validate()
    }
}

/// Fixed-capacity ring of unit-norm keys; the oldest slot is overwritten first.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyQueue {
    rows: Tensor,
    ptr: usize,
    filled: usize,
}

impl KeyQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            rows: Tensor::zeros(&[capacity, dim]),
            ptr: 0,
            filled: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn ptr(&self) -> usize {
        self.ptr
    }

    /// Number of slots written at least once.
    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn is_full(&self) -> bool {
        self.filled == self.capacity()
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    /// Overwrites slots `[ptr, ptr+N)` with `keys` and advances the pointer.
    pub fn push(&mut self, keys: &Tensor) -> Result<()> {
        let cap = self.capacity();
        if keys.rank() != 2 || keys.cols() != self.dim() {
            return Err(Error::Contract(format!(
                "keys {:?} do not match queue dimension {}",
                keys.shape(),
                self.dim()
            )));
        }
        let n = keys.rows();
        if n == 0 || !cap.is_multiple_of(n) {
            return Err(Error::Contract(format!(
                "batch of {n} keys does not divide queue capacity {cap}"
            )));
        }
        for i in 0..n {
            let norm = keys.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Contract(format!("key {i} has norm {norm}, expected 1")));
            }
        }
        for i in 0..n {
            self.rows.row_mut(self.ptr + i).copy_from_slice(keys.row(i));
        }
        self.ptr = (self.ptr + n) % cap;
        self.filled = (self.filled + n).min(cap);
        Ok(())
    }
}

/// `θ_k ← m·θ_k + (1−m)·θ_q` over backbone and head.
///
/// Frozen key parameters are left as they are.
pub fn momentum_update(key: &mut EncoderParams, query: &EncoderParams, m: f64) -> Result<()> {
    fn blend(key: &mut ParamSet, query: &ParamSet, m: f64) -> Result<()> {
        if !key.same_layout(query) {
            return Err(Error::Contract(
                "momentum update between differently shaped encoders".into(),
            ));
        }
        for ((_, k), (_, q)) in key.iter_mut().zip(query.iter()) {
            if k.frozen {
                continue;
            }
            for (kv, &qv) in k.value.data_mut().iter_mut().zip(q.value.data()) {
                *kv = m * *kv + (1.0 - m) * qv;
            }
        }
        Ok(())
    }
    blend(&mut key.backbone, &query.backbone, m)?;
    blend(&mut key.head, &query.head, m)
}

/// Records InfoNCE on `graph`: logits `[q·k₊, q·k₁…q·k_M]/τ`, loss is the
/// batch mean of `−log softmax(logits)[0]`. Returns `(similarities, loss)`.
pub fn info_nce_node(
    graph: &mut Graph,
    q: NodeId,
    k_plus: &Tensor,
    bank: &Tensor,
    tau: f64,
) -> Result<(NodeId, NodeId)> {
    let sims = graph.similarity(q, k_plus, bank)?;
    let logp = graph.log_softmax(sims, tau)?;
    let loss = graph.nll_first_mean(logp)?;
    Ok((sims, loss))
}

/// InfoNCE value for row-aligned unit-norm `q` and `k_plus` against `queue`.
pub fn info_nce_loss(q: &Tensor, k_plus: &Tensor, queue: &KeyQueue, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let qn = g.constant(q.clone());
    let (_, loss) = info_nce_node(&mut g, qn, k_plus, queue.rows(), tau)?;
    g.value(loss).item()
}

/// Picks `n` distinct frames uniformly at random.
pub fn sample_batch(data: &[Frame], n: usize, rng: &mut Rng) -> Result<Vec<Frame>> {
    if data.len() < n {
        return Err(Error::Parameter(format!(
            "dataset of {} frames is smaller than batch size {n}",
            data.len()
        )));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    // partial Fisher–Yates
    for i in 0..n {
        let j = i + rng.below(data.len() - i);
        idx.swap(i, j);
    }
    Ok(idx[..n].iter().map(|&i| data[i].clone()).collect())
}

/// Batched query and key views for one step. Draws exactly one value from `rng`.
pub fn batch_views(batch: &[Frame], augment: &AugmentConfig, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    let seed = rng.next_u64();
    let (q, k) = two_views(batch, augment, seed)?;
    Ok((frames_to_batch(&q)?, frames_to_batch(&k)?))
}

/// Query/key encoder pair with its key queue.
#[derive(Debug, Clone)]
pub struct MoCoState {
    pub query: EncoderParams,
    pub key: EncoderParams,
    pub queue: KeyQueue,
    pub cfg: TrainConfig,
    pub step_count: u64,
}

impl MoCoState {
    /// Key encoder starts as an exact copy of the query encoder.
    pub fn new(query: EncoderParams, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut key = query.clone();
        key.zero_grad();
        let queue = KeyQueue::new(cfg.queue_size, query.config.d_embed);
        Ok(Self {
            query,
            key,
            queue,
            cfg,
            step_count: 0,
        })
    }

    /// Fills the queue with `M/N` batches of key embeddings.
    pub fn warm_up(&mut self, data: &[Frame], rng: &mut Rng) -> Result<()> {
        let batches = self.cfg.queue_size / self.cfg.batch_size;
        for _ in 0..batches {
            let batch = sample_batch(data, self.cfg.batch_size, rng)?;
            let (_, xk) = batch_views(&batch, &self.cfg.augment, rng)?;
            let keys = encode_batch(&self.key, xk)?;
            self.queue.push(&keys)?;
        }
        Ok(())
    }

    fn check_batch(&self, batch: &[Frame]) -> Result<()> {
        if batch.len() != self.cfg.batch_size {
            return Err(Error::Contract(format!(
                "batch has {} frames, configured batch size is {}",
                batch.len(),
                self.cfg.batch_size
            )));
        }
        if !self.queue.is_full() {
            return Err(Error::Contract("key queue must be warmed before training".into()));
        }
        Ok(())
    }

    /// One contrastive step; returns the InfoNCE loss before the update.
    pub fn train_step(&mut self, batch: &[Frame], rng: &mut Rng) -> Result<f64> {
        self.check_batch(batch)?;
        let (xq, xk) = batch_views(batch, &self.cfg.augment, rng)?;
        let k_plus = encode_batch(&self.key, xk)?;
        let mut g = Graph::new();
        let x = g.constant(xq);
        let q = self.query.forward(&mut g, x, true)?;
        let (_, loss) = info_nce_node(&mut g, q.embedding, &k_plus, self.queue.rows(), self.cfg.tau)?;
        let value = g.value(loss).item()?;
        let grads = g.backward(loss)?;
        self.apply(&grads, k_plus)?;
        Ok(value)
    }

    /// Gradient step on the query encoder, momentum update, queue push.
    pub(crate) fn apply(&mut self, grads: &crate::tensor::Gradients, k_plus: Tensor) -> Result<()> {
        self.query.backbone.accumulate(grads)?;
        self.query.head.accumulate(grads)?;
        let sgd = self.cfg.sgd();
        sgd_step(&mut self.query.backbone, &sgd);
        sgd_step(&mut self.query.head, &sgd);
        momentum_update(&mut self.key, &self.query, self.cfg.m)?;
        self.queue.push(&k_plus)?;
        self.step_count += 1;
        Ok(())
    }

    /// Warm-up followed by `cfg.steps` steps on random batches of `data`.
    pub fn fit(&mut self, data: &[Frame], rng: &mut Rng, mut on_step: impl FnMut(u64, f64)) -> Result<Vec<f64>> {
        if !self.queue.is_full() {
            self.warm_up(data, rng)?;
        }
        let mut losses = Vec::with_capacity(self.cfg.steps);
        for _ in 0..self.cfg.steps {
            let batch = sample_batch(data, self.cfg.batch_size, rng)?;
            let loss = self.train_step(&batch, rng)?;
            on_step(self.step_count, loss);
            losses.push(loss);
        }
        Ok(losses)
    }
}

/// Embeddings of an already batched `B×C×H×W` tensor, without gradients.
pub fn encode_batch(enc: &EncoderParams, x: Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xn = g.constant(x);
    let out = enc.forward(&mut g, xn, false)?;
    Ok(g.value(out.embedding).clone())
}
