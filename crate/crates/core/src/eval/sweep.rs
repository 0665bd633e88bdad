//! Label-efficiency sweep: probe accuracy as a function of label fraction.

use std::fmt::Write as _;

use serde::Serialize;

use super::features::{extract_features, FeatureMode, FeatureSet};
use super::metrics::compute_phase_metrics;
use super::probe::{fit_linear_probe, ProbeConfig};
use crate::augment::Frame;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "encoder,mode,fraction,seed,accuracy,precision,recall,jaccard";

/// Every 4th frame of each class (by position within the class) is held out.
pub fn split_train_test(labels: &[usize], num_classes: usize) -> (Vec<usize>, Vec<usize>) {
    let mut seen = vec![0usize; num_classes];
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, &l) in labels.iter().enumerate() {
        if seen[l] % 4 == 3 {
            test.push(i);
        } else {
            train.push(i);
        }
        seen[l] += 1;
    }
    (train, test)
}

/// A named feature extractor.
#[derive(Debug, Clone)]
pub struct SweepEncoder {
    pub name: String,
    pub mode: FeatureMode,
    pub student: Option<EncoderParams>,
    pub teacher: Option<EncoderParams>,
}

impl SweepEncoder {
    pub fn features(&self, frames: &[Frame]) -> Result<crate::tensor::Tensor> {
        extract_features(self.student.as_ref(), self.teacher.as_ref(), frames, self.mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub encoder: String,
    pub mode: FeatureMode,
    pub fraction: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub encoder: String,
    pub mode: FeatureMode,
    pub fraction: f64,
    pub runs: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub precision_mean: f64,
    pub recall_mean: f64,
    pub jaccard_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.encoder, r.mode, r.fraction, r.seed, r.accuracy, r.precision, r.recall, r.jaccard
            );
        }
        s
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)?)
    }

    /// Summary entries for one encoder, ordered as the fractions were given.
    pub fn curve(&self, encoder: &str) -> Vec<&SweepSummary> {
        self.summary.iter().filter(|s| s.encoder == encoder).collect()
    }
}

/// For every (encoder, fraction, seed): extract, probe the train split,
/// score the held-out split.
pub fn label_efficiency_sweep(
    encoders: &[SweepEncoder],
    fractions: &[f64],
    seeds: &[u64],
    frames: &[Frame],
    labels: &[usize],
    num_classes: usize,
    probe: &ProbeConfig,
) -> Result<SweepResult> {
    if encoders.is_empty() || fractions.is_empty() || seeds.is_empty() {
        return Err(Error::Parameter("sweep needs at least one encoder, fraction and seed".into()));
    }
    if let Some(f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Parameter(format!("fraction {f} outside (0, 1]")));
    }
    let (train_idx, test_idx) = split_train_test(labels, num_classes);
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for enc in encoders {
        let all = FeatureSet::new(enc.features(frames)?, labels.to_vec(), num_classes)?;
        let (train, test) = (all.select(&train_idx), all.select(&test_idx));
        for &fraction in fractions {
            let start = rows.len();
            for &seed in seeds {
                let cfg = ProbeConfig { label_fraction: fraction, seed, ..*probe };
                let p = fit_linear_probe(&train, &cfg)?;
                let m = compute_phase_metrics(&p.predict(&test.features)?, &test.labels, num_classes)?;
                rows.push(SweepRow {
                    encoder: enc.name.clone(),
                    mode: enc.mode,
                    fraction,
                    seed,
                    accuracy: m.accuracy,
                    precision: m.precision,
                    recall: m.recall,
                    jaccard: m.jaccard,
                });
            }
            let group = &rows[start..];
            let col = |f: fn(&SweepRow) -> f64| group.iter().map(f).collect::<Vec<_>>();
            let (accuracy_mean, accuracy_std) = mean_std(&col(|r| r.accuracy));
            summary.push(SweepSummary {
                encoder: enc.name.clone(),
                mode: enc.mode,
                fraction,
                runs: group.len(),
                accuracy_mean,
                accuracy_std,
                precision_mean: mean_std(&col(|r| r.precision)).0,
                recall_mean: mean_std(&col(|r| r.recall)).0,
                jaccard_mean: mean_std(&col(|r| r.jaccard)).0,
            });
        }
    }
    Ok(SweepResult { rows, summary })
}
