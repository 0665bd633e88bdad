use std::collections::BTreeMap;

use super::{ops, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Input,
    Param(String),
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { x: NodeId, k: NodeId, stride: usize, pad: usize },
    Relu(NodeId),
    GlobalAvgPool(NodeId),
    L2Normalize { x: NodeId, eps: f64 },
    Softmax { z: NodeId, tau: f64 },
    LogSoftmax { z: NodeId, tau: f64 },
    Similarity { q: NodeId, positives: Tensor, bank: Tensor },
    NllFirstMean(NodeId),
    KlRowsMean { logq: NodeId, targets: Tensor },
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    SumSquares(NodeId),
    WeightedSum { x: NodeId, weights: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes can only reference earlier nodes, so insertion order is a
/// topological order and the reverse sweep is a single backwards pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to `node`; `None` if it did not
    /// participate or was recorded without gradient tracking.
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor> {
        self.by_node.get(node.0).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    /// A differentiable leaf whose gradient is reported via [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, true)
    }

    /// A named parameter leaf. With `trainable == false` it behaves as a constant.
    pub fn param(&mut self, name: &str, value: Tensor, trainable: bool) -> NodeId {
        self.push(value, Op::Param(name.to_string()), trainable)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::affine(self.value(x), self.value(w), self.value(b))?;
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(v, Op::Affine { x, w, b }, ng))
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let v = ops::conv2d(self.value(x), self.value(k), stride, pad)?;
        let ng = self.needs(&[x, k]);
        Ok(self.push(v, Op::Conv2d { x, k, stride, pad }, ng))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = ops::relu(self.value(x));
        let ng = self.needs(&[x]);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::global_avg_pool(self.value(x))?;
        let ng = self.needs(&[x]);
        Ok(self.push(v, Op::GlobalAvgPool(x), ng))
    }

    pub fn l2_normalize(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let v = ops::l2_normalize(self.value(x), eps)?;
        let ng = self.needs(&[x]);
        Ok(self.push(v, Op::L2Normalize { x, eps }, ng))
    }

    pub fn softmax(&mut self, z: NodeId, tau: f64) -> Result<NodeId> {
        let v = ops::softmax_with_temperature(self.value(z), tau)?;
        let ng = self.needs(&[z]);
        Ok(self.push(v, Op::Softmax { z, tau }, ng))
    }

    pub fn log_softmax(&mut self, z: NodeId, tau: f64) -> Result<NodeId> {
        let v = ops::log_softmax_with_temperature(self.value(z), tau)?;
        let ng = self.needs(&[z]);
        Ok(self.push(v, Op::LogSoftmax { z, tau }, ng))
    }

    /// Rows `[q·k₊, q·bank₁, …, q·bank_M]`; positives and bank are detached.
    pub fn similarity(&mut self, q: NodeId, positives: &Tensor, bank: &Tensor) -> Result<NodeId> {
        let v = ops::similarity_logits(self.value(q), positives, bank)?;
        let ng = self.needs(&[q]);
        Ok(self.push(
            v,
            Op::Similarity {
                q,
                positives: positives.clone(),
                bank: bank.clone(),
            },
            ng,
        ))
    }

    /// `−mean_b logp[b][0]`.
    pub fn nll_first_mean(&mut self, logp: NodeId) -> Result<NodeId> {
        let lp = self.value(logp);
        if lp.rank() != 2 || lp.cols() == 0 {
            return Err(dim_err("nll_first_mean", format!("expected B×K, got {:?}", lp.shape())));
        }
        let rows = lp.rows();
        let v = -(0..rows).map(|r| lp.row(r)[0]).sum::<f64>() / rows as f64;
        let ng = self.needs(&[logp]);
        Ok(self.push(Tensor::scalar(v), Op::NllFirstMean(logp), ng))
    }

    /// Row-averaged `KL(targets ‖ exp(logq))`; targets are constants.
    pub fn kl_rows_mean(&mut self, logq: NodeId, targets: &Tensor) -> Result<NodeId> {
        let v = ops::kl_rows_mean(targets, self.value(logq))?;
        let ng = self.needs(&[logq]);
        Ok(self.push(
            Tensor::scalar(v),
            Op::KlRowsMean {
                logq,
                targets: targets.clone(),
            },
            ng,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(dim_err("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let mut v = va.clone();
        v.add_assign(vb);
        let ng = self.needs(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).map(|a| a * c);
        let ng = self.needs(&[x]);
        self.push(v, Op::Scale(x, c), ng)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(&[x]);
        self.push(v, Op::Sum(x), ng)
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).data().iter().map(|a| a * a).sum());
        let ng = self.needs(&[x]);
        self.push(v, Op::SumSquares(x), ng)
    }

    /// `Σ w ⊙ x` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: NodeId, weights: &Tensor) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.shape() != weights.shape() {
            return Err(dim_err(
                "weighted_sum",
                format!("{:?} vs {:?}", vx.shape(), weights.shape()),
            ));
        }
        let v = Tensor::scalar(ops::dot(vx.data(), weights.data()));
        let ng = self.needs(&[x]);
        Ok(self.push(
            v,
            Op::WeightedSum {
                x,
                weights: weights.clone(),
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Constant | Op::Input | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Constant | Op::Input | Op::Param(_) => {}
                Op::Affine { x, w, b } => {
                    let (dx, dw, db) = ops::affine_backward(self.value(*x), self.value(*w), &g);
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *w, dw);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Conv2d { x, k, stride, pad } => {
                    let (dx, dk) =
                        ops::conv2d_backward(self.value(*x), self.value(*k), *stride, *pad, &g)?;
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *k, dk);
                }
                Op::Relu(x) => {
                    let dx = ops::relu_backward(self.value(*x), &g);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::GlobalAvgPool(x) => {
                    let dx = ops::global_avg_pool_backward(self.value(*x), &g)?;
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::L2Normalize { x, eps } => {
                    let dx = ops::l2_normalize_backward(self.value(*x), *eps, &g);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Softmax { z, tau } => {
                    let dz = ops::softmax_backward(&node.value, *tau, &g);
                    self.accumulate(&mut grads, *z, dz);
                }
                Op::LogSoftmax { z, tau } => {
                    let dz = ops::log_softmax_backward(&node.value, *tau, &g);
                    self.accumulate(&mut grads, *z, dz);
                }
                Op::Similarity { q, positives, bank } => {
                    let dq = ops::similarity_logits_backward(positives, bank, &g);
                    self.accumulate(&mut grads, *q, dq);
                }
                Op::NllFirstMean(logp) => {
                    let lp = self.value(*logp);
                    let rows = lp.rows();
                    let mut d = Tensor::zeros(lp.shape());
                    let gs = g.data()[0];
                    for r in 0..rows {
                        d.row_mut(r)[0] = -gs / rows as f64;
                    }
                    self.accumulate(&mut grads, *logp, d);
                }
                Op::KlRowsMean { logq, targets } => {
                    let lq = self.value(*logq);
                    let n = lq.shape().last().copied().unwrap_or(1).max(1);
                    let rows = (lq.len() / n) as f64;
                    let gs = g.data()[0];
                    let d = targets.map(|t| -t * gs / rows);
                    self.accumulate(&mut grads, *logq, d);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g);
                }
                Op::Scale(x, c) => {
                    let d = g.map(|v| v * c);
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Sum(x) => {
                    let d = Tensor::filled(self.value(*x).shape(), g.data()[0]);
                    self.accumulate(&mut grads, *x, d);
                }
                Op::SumSquares(x) => {
                    let gs = g.data()[0];
                    let d = self.value(*x).map(|v| 2.0 * v * gs);
                    self.accumulate(&mut grads, *x, d);
                }
                Op::WeightedSum { x, weights } => {
                    let gs = g.data()[0];
                    let d = weights.map(|w| w * gs);
                    self.accumulate(&mut grads, *x, d);
                }
            }
        }

        let mut params = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if let Some(g) = &grads[idx] {
                    match params.get_mut(name) {
                        None => {
                            params.insert(name.clone(), g.clone());
                        }
                        Some(acc) => Tensor::add_assign(acc, g),
                    }
                }
            }
        }
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            slot @ None => *slot = Some(g),
            Some(acc) => acc.add_assign(&g),
        }
    }
}
