//! Set-prediction and point-prediction metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::PredictionSet;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} predictions for {1} labels")]
    LengthMismatch(usize, usize),
    #[error("no test samples")]
    EmptyTestSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SetMetricsReport {
    pub coverage: f64,
    pub inefficiency: f64,
    pub certainty: f64,
    pub uncertainty: f64,
    pub mistrust: f64,
}

/// Averages of the five set indicators over the test samples. Certainty
/// counts singletons holding the true label; uncertainty counts sets equal
/// to the full label set.
pub fn set_metrics(
    sets: &[PredictionSet],
    truth: &[usize],
    m: usize,
) -> Result<SetMetricsReport, MetricsError> {
    if sets.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(sets.len(), truth.len()));
    }
    if sets.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    let mut r = SetMetricsReport::default();
    for (set, &y) in sets.iter().zip(truth) {
        let covered = set.contains(y);
        r.coverage += f64::from(covered);
        r.inefficiency += set.len() as f64;
        r.certainty += f64::from(covered && set.len() == 1);
        r.uncertainty += f64::from(set.len() == m);
        r.mistrust += f64::from(set.is_empty());
    }
    let k = sets.len() as f64;
    r.coverage /= k;
    r.inefficiency /= k;
    r.certainty /= k;
    r.uncertainty /= k;
    r.mistrust /= k;
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointMetricsReport {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One-vs-rest precision, recall and F1 per class (0/0 counts as 0),
/// their unweighted means, and accuracy.
pub fn point_metrics(
    pred: &[usize],
    truth: &[usize],
    m: usize,
) -> Result<PointMetricsReport, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    let mut tp = vec![0usize; m];
    let mut predicted = vec![0usize; m];
    let mut actual = vec![0usize; m];
    let mut correct = 0;
    for (&p, &t) in pred.iter().zip(truth) {
        predicted[p] += 1;
        actual[t] += 1;
        if p == t {
            tp[p] += 1;
            correct += 1;
        }
    }
    let precision: Vec<f64> = (0..m).map(|k| ratio(tp[k], predicted[k])).collect();
    let recall: Vec<f64> = (0..m).map(|k| ratio(tp[k], actual[k])).collect();
    let f1: Vec<f64> = precision
        .iter()
        .zip(&recall)
        .map(|(&p, &r)| {
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        })
        .collect();
    let avg = |v: &[f64]| v.iter().sum::<f64>() / m as f64;
    Ok(PointMetricsReport {
        accuracy: ratio(correct, pred.len()),
        macro_precision: avg(&precision),
        macro_recall: avg(&recall),
        macro_f1: avg(&f1),
        precision,
        recall,
        f1,
    })
}
