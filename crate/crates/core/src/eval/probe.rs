//! Multinomial logistic regression on frozen features.
//!
//! Features are standardised with statistics of the selected training subset,
//! then an affine classifier is fit by full-batch gradient descent on the
//! mean cross-entropy plus `weight_decay/2·‖W‖²`.

use serde::{Deserialize, Serialize};

use super::features::FeatureSet;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ops, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr: f64,
    pub steps: usize,
    pub weight_decay: f64,
    pub label_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            steps: 300,
            weight_decay: 1e-4,
            label_fraction: 1.0,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Parameter(format!(
                "label_fraction must lie in (0, 1], got {}",
                self.label_fraction
            )));
        }
        if self.lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Parameter("probe lr and weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per class `c`, `⌈f·n_c⌉` row indices drawn from `Rng::stream(seed, [c])`;
/// returned in ascending order.
pub fn stratified_subset(labels: &[usize], num_classes: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for c in 0..num_classes {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            return Err(Error::Sampling(format!(
                "class {c} has no labeled samples; choose a different seed or a larger label fraction"
            )));
        }
        let take = ((fraction * members.len() as f64).ceil() as usize).clamp(1, members.len());
        if take < members.len() {
            Rng::stream(seed, &[c as u64]).shuffle(&mut members);
        }
        out.extend_from_slice(&members[..take]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Trained affine classifier together with its input standardisation.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub weights: Tensor,
    pub bias: Tensor,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Objective value before each gradient step, plus the final value.
    pub loss_history: Vec<f64>,
    /// Training rows used, in ascending order.
    pub train_rows: Vec<usize>,
}

impl LinearProbe {
    fn standardize(&self, x: &Tensor) -> Tensor {
        let d = x.cols();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        ops::affine(&self.standardize(x), &self.weights, &self.bias)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok((0..z.rows())
            .map(|r| {
                z.row(r)
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}

/// Mean cross-entropy + L2 penalty, and its gradients `(dW, db)`.
fn objective(x: &Tensor, labels: &[usize], w: &Tensor, b: &Tensor, wd: f64) -> Result<(f64, Tensor, Tensor)> {
    let n = labels.len() as f64;
    let z = ops::affine(x, w, b)?;
    let p = ops::softmax_with_temperature(&z, 1.0)?;
    let mut loss = 0.0;
    let mut dz = p.clone();
    for (r, &y) in labels.iter().enumerate() {
        loss -= p.row(r)[y].max(f64::MIN_POSITIVE).ln();
        dz.row_mut(r)[y] -= 1.0;
    }
    loss /= n;
    loss += 0.5 * wd * w.data().iter().map(|v| v * v).sum::<f64>();
    let dz = dz.map(|v| v / n);
    let (_, mut dw, db) = ops::affine_backward(x, w, &dz);
    for (g, &wv) in dw.data_mut().iter_mut().zip(w.data()) {
        *g += wd * wv;
    }
    Ok((loss, dw, db))
}

/// Fits a probe on the stratified label subset selected by `cfg`.
pub fn fit_linear_probe(fs: &FeatureSet, cfg: &ProbeConfig) -> Result<LinearProbe> {
    cfg.validate()?;
    let rows = stratified_subset(&fs.labels, fs.num_classes, cfg.label_fraction, cfg.seed)?;
    let sub = fs.select(&rows);
    let (n, d, k) = (sub.len(), sub.dim(), fs.num_classes);

    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(sub.features.row(r)) {
            *m += v / n as f64;
        }
    }
    let mut scale = vec![0.0; d];
    for r in 0..n {
        for ((s, v), m) in scale.iter_mut().zip(sub.features.row(r)).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    for s in &mut scale {
        *s = if *s > 1e-16 { s.sqrt() } else { 1.0 };
    }

    let mut probe = LinearProbe {
        weights: Tensor::zeros(&[d, k]),
        bias: Tensor::zeros(&[k]),
        mean,
        scale,
        loss_history: Vec::with_capacity(cfg.steps + 1),
        train_rows: rows,
    };
    let x = probe.standardize(&sub.features);
    for _ in 0..cfg.steps {
        let (loss, dw, db) = objective(&x, &sub.labels, &probe.weights, &probe.bias, cfg.weight_decay)?;
        probe.loss_history.push(loss);
        for (w, g) in probe.weights.data_mut().iter_mut().zip(dw.data()) {
            *w -= cfg.lr * g;
        }
        for (b, g) in probe.bias.data_mut().iter_mut().zip(db.data()) {
            *b -= cfg.lr * g;
        }
    }
    let (loss, _, _) = objective(&x, &sub.labels, &probe.weights, &probe.bias, cfg.weight_decay)?;
    probe.loss_history.push(loss);
    Ok(probe)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable() -> FeatureSet {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut r = Rng::new(4);
        for i in 0..40 {
            let c = i % 2;
            let off = if c == 0 { -2.0 } else { 2.0 };
            rows.push(vec![off + 0.3 * r.normal(), 0.5 * r.normal()]);
            labels.push(c);
        }
        FeatureSet::new(Tensor::from_rows(&rows).unwrap(), labels, 2).unwrap()
    }

    #[test]
    fn separable_reaches_full_accuracy() {
        let fs = separable();
        let probe = fit_linear_probe(&fs, &ProbeConfig { steps: 500, lr: 0.5, ..Default::default() }).unwrap();
        let pred = probe.predict(&fs.features).unwrap();
        assert_eq!(pred, fs.labels);
    }

    #[test]
    fn full_fraction_uses_every_row_once() {
        let fs = separable();
        let probe = fit_linear_probe(&fs, &ProbeConfig { steps: 1, ..Default::default() }).unwrap();
        assert_eq!(probe.train_rows, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic_weights() {
        let fs = separable();
        let cfg = ProbeConfig { label_fraction: 0.3, seed: 9, ..Default::default() };
        let a = fit_linear_probe(&fs, &cfg).unwrap();
        let b = fit_linear_probe(&fs, &cfg).unwrap();
        assert!(a.weights.bitwise_eq(&b.weights));
        assert!(a.bias.bitwise_eq(&b.bias));
    }

    #[test]
    fn stratified_counts_are_ceilings() {
        let labels: Vec<usize> = (0..23).map(|i| if i < 10 { 0 } else { 1 }).collect();
        let s = stratified_subset(&labels, 2, 0.25, 1).unwrap();
        assert_eq!(s.iter().filter(|&&i| labels[i] == 0).count(), 3);
        assert_eq!(s.iter().filter(|&&i| labels[i] == 1).count(), 4);
    }

    #[test]
    fn missing_class_is_sampling_error() {
        let labels = vec![0, 0, 2];
        assert!(matches!(stratified_subset(&labels, 3, 1.0, 0), Err(Error::Sampling(_))));
    }

    #[test]
    fn loss_non_increasing_at_small_lr() {
        let fs = separable();
        let probe = fit_linear_probe(&fs, &ProbeConfig { lr: 0.01, steps: 200, ..Default::default() }).unwrap();
        for w in probe.loss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }
}
