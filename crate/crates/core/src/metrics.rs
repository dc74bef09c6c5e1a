//! Evaluation metrics: overall and per-class accuracy, and the class-balance
//! summary `μ`, `σ` (sample standard deviation, `N − 1`) and `c_v = σ/μ`.
//!
//! Target ground truth is wrapped in [`HeldOutLabels`], whose contents only
//! this module can read. Adaptation code can pass it along for scoring but
//! has no way to look inside.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::LabelBank;

/// Ground-truth target labels, readable only by the metrics in this module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeldOutLabels {
    labels: Vec<usize>,
}

impl HeldOutLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        Self { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gives up the wrapper for writing the labels to an evaluation file.
    pub fn into_export(self) -> Vec<usize> {
        self.labels
    }

    /// Restricts to the listed instances, in the listed order.
    pub fn select(&self, indices: &[usize]) -> HeldOutLabels {
        HeldOutLabels {
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// `μ`, sample `σ` and `c_v` of a set of per-class accuracies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassBalance {
    pub mean: f64,
    pub std: f64,
    pub cv: f64,
}

/// Summary statistics over per-class accuracies (any unit). A single value
/// has `σ = 0`; `c_v` is 0 whenever `σ` is.
pub fn class_balance(accuracies: &[f64]) -> Result<ClassBalance> {
    if accuracies.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let std = if accuracies.len() < 2 {
        0.0
    } else {
        (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let cv = if std == 0.0 { 0.0 } else { std / mean };
    Ok(ClassBalance { mean, std, cv })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall_accuracy: f64,
    /// `None` for classes absent from the ground truth.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub coefficient_of_variation: f64,
    pub missing_classes: Vec<usize>,
}

fn check_predictions(predictions: &[usize], truth: &HeldOutLabels) -> Result<()> {
    if predictions.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: predictions.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

/// Fraction of predictions equal to the ground truth.
pub fn accuracy(predictions: &[usize], truth: &HeldOutLabels) -> Result<f64> {
    check_predictions(predictions, truth)?;
    let correct = predictions.iter().zip(&truth.labels).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Per-class and overall accuracy with class-balance statistics over the
/// classes that occur in the ground truth. Accuracies are fractions.
pub fn compute_metrics(predictions: &[usize], truth: &HeldOutLabels, num_classes: usize) -> Result<MetricsReport> {
    check_predictions(predictions, truth)?;
    let mut correct = vec![0usize; num_classes];
    let mut count = vec![0usize; num_classes];
    for (&p, &t) in predictions.iter().zip(&truth.labels) {
        if t >= num_classes {
            return Err(Error::LabelOutOfRange { label: t, num_classes });
        }
        count[t] += 1;
        if p == t {
            correct[t] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|k| (count[k] > 0).then(|| correct[k] as f64 / count[k] as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let balance = class_balance(&present)?;
    Ok(MetricsReport {
        overall_accuracy: correct.iter().sum::<usize>() as f64 / predictions.len() as f64,
        per_class_accuracy: per_class,
        acc_mean: balance.mean,
        acc_std: balance.std,
        coefficient_of_variation: balance.cv,
        missing_classes: (0..num_classes).filter(|&k| count[k] == 0).collect(),
    })
}

/// Agreement between hard pseudo-labels and the held-out truth.
pub fn pseudo_label_accuracy(labels: &LabelBank, truth: &HeldOutLabels) -> Result<f64> {
    accuracy(&labels.hard_labels, truth)
}
