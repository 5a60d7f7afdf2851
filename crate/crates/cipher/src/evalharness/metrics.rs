//! Confusion counts and the percent-scale classification metrics derived
//! from them. The fake class (label 1) is the positive class throughout.

use crate::error::{CipherError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }
}

/// Count agreement between ground-truth labels and detector decisions, both
/// encoded as {0 = real, 1 = fake}.
pub fn confusion(labels: &[u8], decisions: &[u8]) -> Result<ConfusionMatrix> {
    if labels.len() != decisions.len() {
        return Err(CipherError::shape(
            "confusion inputs",
            labels.len(),
            decisions.len(),
        ));
    }
    if labels.is_empty() {
        return Err(CipherError::Domain(
            "confusion needs at least one sample".into(),
        ));
    }
    let mut cm = ConfusionMatrix::default();
    for (i, (&l, &d)) in labels.iter().zip(decisions.iter()).enumerate() {
        if l > 1 || d > 1 {
            return Err(CipherError::Domain(format!(
                "labels and decisions must be 0/1; sample {i} has ({l}, {d})"
            )));
        }
        match (l, d) {
            (1, 1) => cm.true_pos += 1,
            (0, 1) => cm.false_pos += 1,
            (0, 0) => cm.true_neg += 1,
            (1, 0) => cm.false_neg += 1,
            _ => unreachable!(),
        }
    }
    Ok(cm)
}

/// Accuracy, precision, recall, and F1, all in percent.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Percent metrics with the zero-denominator conventions used by published
/// comparison tables: precision or recall with an empty denominator is 0,
/// and F1 is 0 when precision and recall are both 0.
pub fn metrics(cm: &ConfusionMatrix) -> Metrics {
    let total = cm.total();
    assert!(total > 0, "metrics on an empty confusion matrix");
    let tp = cm.true_pos as f64;
    let accuracy = (tp + cm.true_neg as f64) / total as f64 * 100.0;
    let precision = if cm.true_pos + cm.false_pos == 0 {
        0.0
    } else {
        tp / (cm.true_pos + cm.false_pos) as f64 * 100.0
    };
    let recall = if cm.true_pos + cm.false_neg == 0 {
        0.0
    } else {
        tp / (cm.true_pos + cm.false_neg) as f64 * 100.0
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Metrics {
        accuracy,
        precision,
        recall,
        f1,
    }
}
