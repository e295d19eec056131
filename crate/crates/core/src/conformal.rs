//! Inductive conformal prediction over one-vs-all linear models.

use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{LinearModel, LinearModelSet, TrainError};

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("non-finite non-conformity score")]
    NonFiniteScore,
    #[error("significance level {0} outside [0, 1)")]
    InvalidEpsilon(f64),
    #[error("class {0} out of range")]
    UnknownClass(usize),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<TrainError> for ConformalError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::DimensionMismatch { expected, found } => {
                ConformalError::DimensionMismatch { expected, found }
            }
            _ => ConformalError::NonFiniteScore,
        }
    }
}

/// `+1` when the label is class `k`, `-1` otherwise.
#[inline]
pub fn theta(label: usize, k: usize) -> f64 {
    if label == k {
        1.0
    } else {
        -1.0
    }
}

/// Score of `(x, label)` under the binary problem of class `k`:
/// `-theta(label, k) * (w . x + b)`.
pub fn binary_nonconformity(
    mdl: &LinearModel,
    x: ArrayView1<f64>,
    label: usize,
    k: usize,
) -> Result<f64, ConformalError> {
    let d = crate::classifier::decision_value(mdl, x)?;
    Ok(-theta(label, k) * d)
}

/// Weighted average of the per-class binary scores: weight `lambda` on
/// the label's own class and `(1 - lambda) / (m - 1)` on each other class.
pub fn multiclass_nonconformity(
    ms: &LinearModelSet,
    x: ArrayView1<f64>,
    label: usize,
) -> Result<f64, ConformalError> {
    if label >= ms.n_classes() {
        return Err(ConformalError::UnknownClass(label));
    }
    let decisions = ms.decision_values(x)?;
    Ok(score_from_decisions(
        &decisions,
        label,
        ms.lambda,
        ms.lambda_rest(),
    ))
}

pub(crate) fn score_from_decisions(decisions: &[f64], label: usize, lambda: f64, rest: f64) -> f64 {
    decisions
        .iter()
        .enumerate()
        .map(|(r, d)| {
            let weight = if r == label { lambda } else { rest };
            weight * -theta(label, r) * d
        })
        .sum()
}

/// Calibration scores, in calibration-row order.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRecord {
    pub alphas: Vec<f64>,
    sorted: Vec<f64>,
}

impl CalibrationRecord {
    pub fn new(alphas: Vec<f64>) -> Result<Self, ConformalError> {
        if alphas.is_empty() {
            return Err(ConformalError::EmptyCalibration);
        }
        if alphas.iter().any(|a| !a.is_finite()) {
            return Err(ConformalError::NonFiniteScore);
        }
        let mut sorted = alphas.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(CalibrationRecord { alphas, sorted })
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    /// `(#{alpha_i >= test_alpha} + 1) / (n + 1)`.
    pub fn p_value(&self, test_alpha: f64) -> Result<f64, ConformalError> {
        if !test_alpha.is_finite() {
            return Err(ConformalError::NonFiniteScore);
        }
        let below = self.sorted.partition_point(|&a| a < test_alpha);
        let at_least = self.sorted.len() - below;
        Ok((at_least + 1) as f64 / (self.sorted.len() + 1) as f64)
    }
}

pub fn calibrate(
    ms: &LinearModelSet,
    x: &Array2<f64>,
    y: &[usize],
) -> Result<CalibrationRecord, ConformalError> {
    if y.is_empty() {
        return Err(ConformalError::EmptyCalibration);
    }
    if x.nrows() != y.len() {
        return Err(ConformalError::DimensionMismatch {
            expected: x.nrows(),
            found: y.len(),
        });
    }
    let alphas = x
        .rows()
        .into_iter()
        .zip(y)
        .map(|(row, &label)| multiclass_nonconformity(ms, row, label))
        .collect::<Result<Vec<_>, _>>()?;
    CalibrationRecord::new(alphas)
}

pub fn p_value(rec: &CalibrationRecord, test_alpha: f64) -> Result<f64, ConformalError> {
    rec.p_value(test_alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    /// Class ids with `p > epsilon`, ascending.
    pub labels: Vec<usize>,
    /// One p-value per class id.
    pub p_values: Vec<f64>,
    pub epsilon: f64,
}

impl PredictionSet {
    pub fn contains(&self, label: usize) -> bool {
        self.labels.contains(&label)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Re-thresholds the same p-values at another significance level.
    pub fn at_epsilon(&self, epsilon: f64) -> PredictionSet {
        PredictionSet {
            labels: threshold(&self.p_values, epsilon),
            p_values: self.p_values.clone(),
            epsilon,
        }
    }
}

fn threshold(p_values: &[f64], epsilon: f64) -> Vec<usize> {
    p_values
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > epsilon)
        .map(|(y, _)| y)
        .collect()
}

fn check_epsilon(epsilon: f64) -> Result<(), ConformalError> {
    if (0.0..1.0).contains(&epsilon) {
        Ok(())
    } else {
        Err(ConformalError::InvalidEpsilon(epsilon))
    }
}

/// Every label whose p-value exceeds `epsilon`. May be empty or full.
pub fn prediction_set(
    ms: &LinearModelSet,
    rec: &CalibrationRecord,
    x: ArrayView1<f64>,
    epsilon: f64,
) -> Result<PredictionSet, ConformalError> {
    check_epsilon(epsilon)?;
    let decisions = ms.decision_values(x)?;
    let (lambda, rest) = (ms.lambda, ms.lambda_rest());
    let p_values = (0..ms.n_classes())
        .map(|y| rec.p_value(score_from_decisions(&decisions, y, lambda, rest)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PredictionSet {
        labels: threshold(&p_values, epsilon),
        p_values,
        epsilon,
    })
}

/// A trained model set together with its calibration scores.
#[derive(Debug, Clone)]
pub struct ConformalPredictor {
    pub models: LinearModelSet,
    pub record: CalibrationRecord,
}

impl ConformalPredictor {
    pub fn fit(
        models: LinearModelSet,
        calib_x: &Array2<f64>,
        calib_y: &[usize],
    ) -> Result<Self, ConformalError> {
        let record = calibrate(&models, calib_x, calib_y)?;
        Ok(ConformalPredictor { models, record })
    }

    pub fn predict(
        &self,
        x: &Array2<f64>,
        epsilon: f64,
    ) -> Result<Vec<PredictionSet>, ConformalError> {
        x.rows()
            .into_iter()
            .map(|row| prediction_set(&self.models, &self.record, row, epsilon))
            .collect()
    }

    /// p-value of the given label for each row.
    pub fn label_p_values(&self, x: &Array2<f64>, y: &[usize]) -> Result<Vec<f64>, ConformalError> {
        x.rows()
            .into_iter()
            .zip(y)
            .map(|(row, &label)| {
                self.record
                    .p_value(multiclass_nonconformity(&self.models, row, label)?)
            })
            .collect()
    }
}

/// One row per sample: `sample_id, p_class_0.., set` where `set` joins the
/// member class names with `|`.
pub fn write_prediction_sets(
    path: impl AsRef<Path>,
    sample_ids: &[usize],
    sets: &[PredictionSet],
    class_names: &[String],
) -> Result<(), ConformalError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string()];
    header.extend((0..class_names.len()).map(|k| format!("p_class_{k}")));
    header.push("set".into());
    w.write_record(&header)?;
    for (id, set) in sample_ids.iter().zip(sets) {
        let mut rec = vec![id.to_string()];
        rec.extend(set.p_values.iter().map(|p| p.to_string()));
        rec.push(
            set.labels
                .iter()
                .map(|&k| class_names[k].as_str())
                .collect::<Vec<_>>()
                .join("|"),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
