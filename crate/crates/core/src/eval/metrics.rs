//! Frame-level accuracy plus macro precision, recall and Jaccard.
//!
//! Per class `c`: precision `TP/(TP+FP)`, recall `TP/(TP+FN)`, Jaccard
//! `TP/(TP+FP+FN)`. A class with neither predictions nor instances is left
//! out of the macro means. A class with instances but no predictions has
//! undefined precision; it is scored 0 and flagged. Likewise a class that is
//! predicted but never occurs gets recall 0 and a flag.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
    pub support: usize,
    pub predicted: usize,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

impl ClassMetrics {
    /// Whether the class enters the macro means.
    pub fn counted(&self) -> bool {
        self.support > 0 || self.predicted > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
    pub per_class: Vec<ClassMetrics>,
}

pub fn compute_phase_metrics(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Metrics> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if let Some(bad) = preds.iter().chain(labels).find(|&&c| c >= num_classes) {
        return Err(Error::Contract(format!("class index {bad} outside {num_classes} classes")));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        confusion[y][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let accuracy = if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 };

    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let per_class: Vec<ClassMetrics> = (0..num_classes)
        .map(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let (fp, fnn) = (predicted - tp, support - tp);
            ClassMetrics {
                precision: ratio(tp, tp + fp),
                recall: ratio(tp, tp + fnn),
                jaccard: ratio(tp, tp + fp + fnn),
                support,
                predicted,
                precision_undefined: predicted == 0,
                recall_undefined: support == 0,
            }
        })
        .collect();

    let counted: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.counted()).collect();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if counted.is_empty() {
            0.0
        } else {
            counted.iter().map(|m| f(m)).sum::<f64>() / counted.len() as f64
        }
    };
    Ok(Metrics {
        accuracy,
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        jaccard: mean(|m| m.jaccard),
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect() {
        let y = vec![0, 1, 2, 1, 0];
        let m = compute_phase_metrics(&y, &y, 3).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.jaccard), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn all_predicted_as_class_zero() {
        let labels = vec![0, 0, 1, 1];
        let preds = vec![0; 4];
        let m = compute_phase_metrics(&preds, &labels, 2).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.jaccard, 0.25);
        // class 1 precision is undefined, scored 0 and flagged
        assert!(m.per_class[1].precision_undefined);
        assert_eq!(m.per_class[0].precision, 0.5);
        assert_eq!(m.precision, 0.25);
    }

    #[test]
    fn three_class_confusion() {
        // rows = truth, cols = prediction: [[2,1,0],[0,2,0],[1,0,2]]
        let mut labels = Vec::new();
        let mut preds = Vec::new();
        let cm = [[2, 1, 0], [0, 2, 0], [1, 0, 2]];
        for (y, row) in cm.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                for _ in 0..n {
                    labels.push(y);
                    preds.push(p);
                }
            }
        }
        let m = compute_phase_metrics(&preds, &labels, 3).unwrap();
        assert!((m.accuracy - 6.0 / 8.0).abs() < 1e-15);
        // by hand: P = [2/3, 2/3, 1], R = [2/3, 1, 2/3], J = [2/4, 2/3, 2/3]
        let p = [2.0 / 3.0, 2.0 / 3.0, 1.0];
        let r = [2.0 / 3.0, 1.0, 2.0 / 3.0];
        let j = [0.5, 2.0 / 3.0, 2.0 / 3.0];
        for c in 0..3 {
            assert!((m.per_class[c].precision - p[c]).abs() < 1e-15);
            assert!((m.per_class[c].recall - r[c]).abs() < 1e-15);
            assert!((m.per_class[c].jaccard - j[c]).abs() < 1e-15);
        }
        assert!((m.precision - 7.0 / 9.0).abs() < 1e-15);
        assert!((m.recall - 7.0 / 9.0).abs() < 1e-15);
        assert!((m.jaccard - 11.0 / 18.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_excluded() {
        let m = compute_phase_metrics(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(m.precision, 1.0);
        assert!(!m.per_class[2].counted());
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(compute_phase_metrics(&[0], &[0, 1], 2), Err(Error::Contract(_))));
    }
}
