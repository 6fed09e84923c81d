//! Top-1 evaluation: confusion matrix, per-class and aggregate errors.

use serde::Serialize;

use crate::classifier::Network;
use crate::error::{invalid, Result};
use crate::imbalance_data::LabeledDataset;
use crate::margin_losses::ClassCounts;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    /// Zero for classes absent from the evaluation data.
    pub per_class_error: Vec<f64>,
    pub overall_error: f64,
    /// Present when a training-count split was supplied and the group is non-empty.
    pub majority_error: Option<f64>,
    pub minority_error: Option<f64>,
}

impl MetricsReport {
    pub fn num_classes(&self) -> usize {
        self.confusion.len()
    }

    /// Evaluation examples per class (confusion row sums).
    pub fn class_support(&self) -> Vec<usize> {
        self.confusion.iter().map(|row| row.iter().sum()).collect()
    }

    /// Unweighted mean of the per-class errors over the minority classes of `split`.
    pub fn minority_class_mean(&self, split: &ClassCounts) -> Option<f64> {
        let errs: Vec<f64> = (0..self.num_classes())
            .filter(|&j| split.is_minority(j))
            .map(|j| self.per_class_error[j])
            .collect();
        (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
    }
}

/// Builds a report from true labels and predictions. `split` holds the
/// training counts that decide which classes are minority
/// ([`ClassCounts::is_minority`]).
pub fn report_from_predictions(
    labels: &[usize],
    predictions: &[usize],
    num_classes: usize,
    split: Option<&ClassCounts>,
) -> Result<MetricsReport> {
    if labels.is_empty() {
        return invalid("cannot evaluate on an empty dataset");
    }
    if labels.len() != predictions.len() {
        return invalid(format!(
            "{} labels but {} predictions",
            labels.len(),
            predictions.len()
        ));
    }
    if let Some(split) = split {
        if split.num_classes() != num_classes {
            return invalid(format!(
                "split has {} classes, expected {num_classes}",
                split.num_classes()
            ));
        }
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&y, &p) in labels.iter().zip(predictions) {
        if y >= num_classes || p >= num_classes {
            return invalid(format!(
                "label {y} or prediction {p} out of range for {num_classes} classes"
            ));
        }
        confusion[y][p] += 1;
    }
    let wrong_in = |j: usize| confusion[j].iter().sum::<usize>() - confusion[j][j];
    let support: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
    let per_class_error = (0..num_classes)
        .map(|j| {
            if support[j] == 0 {
                0.0
            } else {
                wrong_in(j) as f64 / support[j] as f64
            }
        })
        .collect();
    let total_wrong: usize = (0..num_classes).map(wrong_in).sum();
    let overall_error = total_wrong as f64 / labels.len() as f64;

    let group_error = |minority: bool| -> Option<f64> {
        let split = split?;
        let members: Vec<usize> = (0..num_classes)
            .filter(|&j| split.is_minority(j) == minority)
            .collect();
        let n: usize = members.iter().map(|&j| support[j]).sum();
        if n == 0 {
            return None;
        }
        let wrong: usize = members.iter().map(|&j| wrong_in(j)).sum();
        Some(wrong as f64 / n as f64)
    };

    Ok(MetricsReport {
        per_class_error,
        overall_error,
        majority_error: group_error(false),
        minority_error: group_error(true),
        confusion,
    })
}

/// Top-1 predictions of `model` on `data` (argmax, smallest index on ties).
pub fn evaluate(
    model: &Network,
    data: &LabeledDataset,
    split: Option<&ClassCounts>,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return invalid("cannot evaluate on an empty dataset");
    }
    if model.num_classes != data.num_classes {
        return invalid(format!(
            "model has {} classes, data has {}",
            model.num_classes, data.num_classes
        ));
    }
    let predictions = (0..data.len())
        .map(|i| model.predict(data.example(i).0))
        .collect::<Result<Vec<_>>>()?;
    report_from_predictions(&data.labels, &predictions, data.num_classes, split)
}
