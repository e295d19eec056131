//! Linear hinge-loss classifiers and the one-vs-all wrapper.
//!
//! Binary models minimise
//! `reg / 2 * ||w||^2 + mean_i max(0, 1 - y_i (w . x_i + b))` with
//! `reg = 1 / (C * n)`, i.e. the usual soft-margin objective divided by
//! `C * n`. The bias is not regularised.

use std::fs::File;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::theta;
use crate::rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("labels contain a single sign")]
    DegenerateLabels,
    #[error("labels must be -1 or +1, found {0}")]
    InvalidLabel(f64),
    #[error("input contains non-finite values")]
    NonFiniteInput,
    #[error("empty training set")]
    EmptyInput,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("class {0} has no training rows")]
    MissingClass(usize),
    #[error("feature {0} is not active")]
    UnknownFeature(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Soft-margin penalty.
    pub c: f64,
    pub epochs: usize,
    /// Initial step; the step at update `t` is `eta0 / (1 + eta0 * reg * t)`.
    pub eta0: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            c: 1.0,
            epochs: 200,
            eta0: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(TrainError::InvalidConfig("C must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig(
                "epochs must be at least 1".into(),
            ));
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(TrainError::InvalidConfig("eta0 must be positive".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        TrainConfig {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LinearModel {
    pub fn zeros(dim: usize) -> Self {
        LinearModel {
            w: vec![0.0; dim],
            b: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    fn raw_decision(&self, x: ArrayView1<f64>) -> f64 {
        self.w.iter().zip(x.iter()).map(|(w, v)| w * v).sum::<f64>() + self.b
    }
}

/// `w . x + b`, with the bias counted once.
pub fn decision_value(mdl: &LinearModel, x: ArrayView1<f64>) -> Result<f64, TrainError> {
    if x.len() != mdl.dim() {
        return Err(TrainError::DimensionMismatch {
            expected: mdl.dim(),
            found: x.len(),
        });
    }
    Ok(mdl.raw_decision(x))
}

/// Result of a binary fit with the objective of the averaged iterate
/// after each epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: LinearModel,
    pub objective_per_epoch: Vec<f64>,
}

/// Regularised hinge objective of `mdl` on `(x, y_pm)`.
pub fn hinge_objective(mdl: &LinearModel, x: ArrayView2<f64>, y_pm: &[f64], c: f64) -> f64 {
    let n = x.nrows() as f64;
    let reg = 1.0 / (c * n);
    let norm2: f64 = mdl.w.iter().map(|v| v * v).sum();
    let loss: f64 = x
        .rows()
        .into_iter()
        .zip(y_pm)
        .map(|(row, &y)| (1.0 - y * mdl.raw_decision(row)).max(0.0))
        .sum();
    0.5 * reg * norm2 + loss / n
}

pub fn train_binary(
    x: ArrayView2<f64>,
    y_pm: &[f64],
    cfg: &TrainConfig,
) -> Result<LinearModel, TrainError> {
    fit_binary(x, y_pm, cfg, false).map(|o| o.model)
}

/// Averaged stochastic subgradient descent. Rows are visited in a fresh
/// seeded permutation every epoch; the returned model is the running
/// average of all iterates.
pub fn fit_binary(
    x: ArrayView2<f64>,
    y_pm: &[f64],
    cfg: &TrainConfig,
    track_objective: bool,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let (n, l) = x.dim();
    if n == 0 {
        return Err(TrainError::EmptyInput);
    }
    if y_pm.len() != n {
        return Err(TrainError::DimensionMismatch {
            expected: n,
            found: y_pm.len(),
        });
    }
    if let Some(&bad) = y_pm.iter().find(|&&v| v != 1.0 && v != -1.0) {
        return Err(TrainError::InvalidLabel(bad));
    }
    if !(y_pm.contains(&1.0) && y_pm.contains(&-1.0)) {
        return Err(TrainError::DegenerateLabels);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(TrainError::NonFiniteInput);
    }

    let reg = 1.0 / (cfg.c * n as f64);
    let mut rng = rng::seeded(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut w = Array1::<f64>::zeros(l);
    let mut b = 0.0;
    let mut avg_w = Array1::<f64>::zeros(l);
    let mut avg_b = 0.0;
    let mut t = 0u64;
    let mut history = Vec::new();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = cfg.eta0 / (1.0 + cfg.eta0 * reg * t as f64);
            let row = x.row(i);
            let y = y_pm[i];
            let margin = y * (w.dot(&row) + b);
            w *= 1.0 - eta * reg;
            if margin < 1.0 {
                w.scaled_add(eta * y, &row);
                b += eta * y;
            }
            let k = t as f64;
            avg_w.zip_mut_with(&w, |a, &v| *a += (v - *a) / k);
            avg_b += (b - avg_b) / k;
        }
        if track_objective {
            let snapshot = LinearModel {
                w: avg_w.to_vec(),
                b: avg_b,
            };
            history.push(hinge_objective(&snapshot, x, y_pm, cfg.c));
        }
    }

    let model = LinearModel {
        w: avg_w.to_vec(),
        b: avg_b,
    };
    if model.w.iter().any(|v| !v.is_finite()) || !model.b.is_finite() {
        return Err(TrainError::NonFiniteInput);
    }
    Ok(TrainOutcome {
        model,
        objective_per_epoch: history,
    })
}

/// One linear model per class over the currently active features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModelSet {
    pub lambda: f64,
    pub active_features: Vec<usize>,
    pub models: Vec<LinearModel>,
}

impl LinearModelSet {
    pub fn new(
        models: Vec<LinearModel>,
        active_features: Vec<usize>,
        lambda: f64,
    ) -> Result<Self, TrainError> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(TrainError::InvalidConfig(format!(
                "lambda {lambda} outside [0, 1]"
            )));
        }
        if models.len() < 2 {
            return Err(TrainError::InvalidConfig(
                "need at least two class models".into(),
            ));
        }
        if let Some(m) = models.iter().find(|m| m.dim() != active_features.len()) {
            return Err(TrainError::DimensionMismatch {
                expected: active_features.len(),
                found: m.dim(),
            });
        }
        Ok(LinearModelSet {
            lambda,
            active_features,
            models,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.models.len()
    }

    pub fn n_features(&self) -> usize {
        self.active_features.len()
    }

    /// Weight on each of the other classes' scores: `(1 - lambda) / (m - 1)`.
    pub fn lambda_rest(&self) -> f64 {
        (1.0 - self.lambda) / (self.n_classes() as f64 - 1.0)
    }

    pub fn check_dim(&self, len: usize) -> Result<(), TrainError> {
        if len != self.n_features() {
            return Err(TrainError::DimensionMismatch {
                expected: self.n_features(),
                found: len,
            });
        }
        Ok(())
    }

    /// Decision value of every class model.
    pub fn decision_values(&self, x: ArrayView1<f64>) -> Result<Vec<f64>, TrainError> {
        self.check_dim(x.len())?;
        Ok(self.models.iter().map(|m| m.raw_decision(x)).collect())
    }

    /// Argmax of the decision values; ties go to the lower class id.
    pub fn predict(&self, x: ArrayView1<f64>) -> Result<usize, TrainError> {
        let scores = self.decision_values(x)?;
        let mut best = 0;
        for (k, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = k;
            }
        }
        Ok(best)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        serde_json::to_writer_pretty(File::create(path)?, self)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let ms: LinearModelSet = serde_json::from_reader(File::open(path)?)?;
        LinearModelSet::new(ms.models, ms.active_features, ms.lambda)
    }
}

/// Trains one binary problem per class, labelling class-`k` rows `+1`.
/// Active features are numbered `0..ncols`.
pub fn train_ova(
    x: &Array2<f64>,
    y: &[usize],
    n_classes: usize,
    cfg: &TrainConfig,
    lambda: f64,
) -> Result<LinearModelSet, TrainError> {
    train_ova_on(x, y, n_classes, cfg, lambda, (0..x.ncols()).collect())
}

/// [`train_ova`] with explicit original indices for the columns of `x`.
pub fn train_ova_on(
    x: &Array2<f64>,
    y: &[usize],
    n_classes: usize,
    cfg: &TrainConfig,
    lambda: f64,
    active_features: Vec<usize>,
) -> Result<LinearModelSet, TrainError> {
    if n_classes < 2 {
        return Err(TrainError::InvalidConfig(
            "need at least two classes".into(),
        ));
    }
    if active_features.len() != x.ncols() {
        return Err(TrainError::DimensionMismatch {
            expected: x.ncols(),
            found: active_features.len(),
        });
    }
    let mut counts = vec![0usize; n_classes];
    for &c in y {
        if c >= n_classes {
            return Err(TrainError::InvalidConfig(format!(
                "class id {c} out of range"
            )));
        }
        counts[c] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(TrainError::MissingClass(k));
    }
    let models = (0..n_classes)
        .map(|k| {
            let labels = ova_labels(y, k);
            train_binary(
                x.view(),
                &labels,
                &cfg.with_seed(rng::derive(cfg.seed, k as u64)),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    LinearModelSet::new(models, active_features, lambda)
}

/// `theta(y_i, k)` for every row.
pub fn ova_labels(y: &[usize], k: usize) -> Vec<f64> {
    y.iter().map(|&c| theta(c, k)).collect()
}

/// Column selection for retraining on a subset of the active features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Restriction {
    /// Original feature indices that remain.
    pub features: Vec<usize>,
    /// Their positions among the current active features.
    pub columns: Vec<usize>,
}

impl Restriction {
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.select(Axis(1), &self.columns)
    }
}

/// Maps `keep` onto the columns of the matrices `ms` was trained on. The
/// caller retrains on the sliced matrices; weights are never just sliced.
pub fn restrict(ms: &LinearModelSet, keep: &[usize]) -> Result<Restriction, TrainError> {
    let columns = keep
        .iter()
        .map(|f| {
            ms.active_features
                .iter()
                .position(|a| a == f)
                .ok_or(TrainError::UnknownFeature(*f))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Restriction {
        features: keep.to_vec(),
        columns,
    })
}
