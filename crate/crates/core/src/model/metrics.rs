//! Confusion-matrix evaluation: per-class precision/recall/F1, macro F1,
//! accuracy. Rows of the confusion matrix are true classes, columns are
//! predictions; support is the row sum.

use serde::{Deserialize, Serialize};

use super::{predict_batch, ModelCheckpoint, ModelError};
use crate::flow::FeatureVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted mean of per-class F1; zero-support classes contribute 0.
    pub macro_f1: f64,
    pub accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
    pub zero_support_classes: Vec<usize>,
}

/// Derive all metrics from a square confusion matrix.
pub fn metrics_from_confusion(confusion: &[Vec<u64>]) -> Metrics {
    let n = confusion.len();
    let mut per_class = Vec::with_capacity(n);
    let mut zero_support = Vec::new();
    let mut total = 0u64;
    let mut correct = 0u64;
    let mut f1_sum = 0.0;

    for c in 0..n {
        debug_assert_eq!(confusion[c].len(), n, "confusion matrix must be square");
        let support: u64 = confusion[c].iter().sum();
        let tp = confusion[c][c];
        let col_sum: u64 = (0..n).map(|r| confusion[r][c]).sum();
        let fp = col_sum - tp;
        let fn_ = support - tp;
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        if support == 0 {
            zero_support.push(c);
        }
        total += support;
        correct += tp;
        f1_sum += f1;
        per_class.push(ClassMetrics { precision, recall, f1, support });
    }

    Metrics {
        per_class,
        macro_f1: if n > 0 { f1_sum / n as f64 } else { 0.0 },
        accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
        confusion: confusion.to_vec(),
        zero_support_classes: zero_support,
    }
}

/// Build a confusion matrix from (true, predicted) pairs.
pub fn confusion_from_pairs(
    num_classes: usize,
    pairs: impl IntoIterator<Item = (usize, usize)>,
) -> Vec<Vec<u64>> {
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (truth, pred) in pairs {
        confusion[truth][pred] += 1;
    }
    confusion
}

/// Evaluate a model on a labeled set.
pub fn evaluate(
    model: &ModelCheckpoint,
    data: &[(FeatureVector, usize)],
) -> Result<Metrics, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    for (i, (_, y)) in data.iter().enumerate() {
        if *y >= model.num_classes {
            return Err(ModelError::LabelOutOfRange {
                index: i,
                label: *y,
                num_classes: model.num_classes,
            });
        }
    }
    let features: Vec<FeatureVector> = data.iter().map(|(fv, _)| fv.clone()).collect();
    let confs = predict_batch(model, &features)?;
    let confusion = confusion_from_pairs(
        model.num_classes,
        data.iter().zip(&confs).map(|((_, y), c)| (*y, c.argmax)),
    );
    Ok(metrics_from_confusion(&confusion))
}
