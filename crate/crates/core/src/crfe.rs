//! Backward feature elimination driven by per-feature non-conformity.
//!
//! The multiclass score of a calibration sample is linear in its
//! features, so the total calibration non-conformity splits into one term
//! per feature plus a bias constant:
//!
//! ```text
//! beta_j = - sum_i x_ij * [ lambda * w_j^{y_i} - lambda' * sum_{r != y_i} w_j^r ]
//! ```
//!
//! `beta_j` is exactly the drop in total calibration non-conformity when
//! feature `j` is deleted from every model (see
//! [`delta_nonconformity_oracle`]). Each iteration retrains, removes the
//! feature with the largest `beta_j` and repeats until a [`StoppingPolicy`]
//! says otherwise.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{train_ova_on, LinearModel, LinearModelSet, TrainConfig, TrainError};
use crate::conformal::{multiclass_nonconformity, theta, ConformalError};
use crate::data::Samples;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error("empty criterion vector")]
    EmptyVector,
    #[error("feature {0} is not active")]
    UnknownFeature(usize),
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid stopping policy: {0}")]
    InvalidPolicy(String),
    #[error("need at least two features, found {0}")]
    TooFewFeatures(usize),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Per-feature non-conformity, aligned with `features`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaVector {
    pub features: Vec<usize>,
    pub values: Vec<f64>,
}

impl BetaVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.values)
    }

    pub fn get(&self, feature: usize) -> Option<f64> {
        self.features
            .iter()
            .position(|&f| f == feature)
            .map(|p| self.values[p])
    }
}

fn check_calibration(
    ms: &LinearModelSet,
    x: &Array2<f64>,
    y: &[usize],
) -> Result<(), SelectionError> {
    if y.is_empty() {
        return Err(SelectionError::EmptyCalibration);
    }
    if x.nrows() != y.len() {
        return Err(SelectionError::DimensionMismatch {
            expected: x.nrows(),
            found: y.len(),
        });
    }
    if x.ncols() != ms.n_features() {
        return Err(SelectionError::DimensionMismatch {
            expected: ms.n_features(),
            found: x.ncols(),
        });
    }
    if let Some(&c) = y.iter().find(|&&c| c >= ms.n_classes()) {
        return Err(ConformalError::UnknownClass(c).into());
    }
    Ok(())
}

pub fn beta_measures(
    ms: &LinearModelSet,
    x: &Array2<f64>,
    y: &[usize],
) -> Result<BetaVector, SelectionError> {
    beta_measures_counted(ms, x, y).map(|(b, _)| b)
}

/// [`beta_measures`] plus the number of multiply-accumulate steps taken,
/// one per (sample, class, feature) triple.
pub fn beta_measures_counted(
    ms: &LinearModelSet,
    x: &Array2<f64>,
    y: &[usize],
) -> Result<(BetaVector, u64), SelectionError> {
    check_calibration(ms, x, y)?;
    let (lambda, rest) = (ms.lambda, ms.lambda_rest());
    let mut values = vec![0.0; ms.n_features()];
    let mut ops = 0u64;
    for (row, &label) in x.rows().into_iter().zip(y) {
        for (r, model) in ms.models.iter().enumerate() {
            let weight = if r == label { lambda } else { rest };
            let coef = weight * theta(label, r);
            for ((beta, w), v) in values.iter_mut().zip(&model.w).zip(row.iter()) {
                *beta -= coef * w * v;
                ops += 1;
            }
        }
    }
    Ok((
        BetaVector {
            features: ms.active_features.clone(),
            values,
        },
        ops,
    ))
}

/// Total calibration non-conformity minus the total after deleting
/// `feature` from every model and sample, weights otherwise unchanged.
pub fn delta_nonconformity_oracle(
    ms: &LinearModelSet,
    x: &Array2<f64>,
    y: &[usize],
    feature: usize,
) -> Result<f64, SelectionError> {
    let pos = ms
        .active_features
        .iter()
        .position(|&f| f == feature)
        .ok_or(SelectionError::UnknownFeature(feature))?;
    check_calibration(ms, x, y)?;
    let keep: Vec<usize> = (0..ms.n_features()).filter(|&c| c != pos).collect();
    let reduced = LinearModelSet {
        lambda: ms.lambda,
        active_features: keep.iter().map(|&c| ms.active_features[c]).collect(),
        models: ms
            .models
            .iter()
            .map(|m| LinearModel {
                w: keep.iter().map(|&c| m.w[c]).collect(),
                b: m.b,
            })
            .collect(),
    };
    let x_reduced = x.select(Axis(1), &keep);
    let mut total = 0.0;
    for (i, &label) in y.iter().enumerate() {
        let full = multiclass_nonconformity(ms, x.row(i), label)?;
        let without = multiclass_nonconformity(&reduced, x_reduced.row(i), label)?;
        total += full - without;
    }
    Ok(total)
}

/// Feature with the largest value; ties go to the lowest feature index.
pub fn argmax_beta(bv: &BetaVector) -> Result<usize, SelectionError> {
    pick(&bv.features, &bv.values, |cand, best| cand > best)
}

/// Feature with the smallest value; ties go to the lowest feature index.
pub fn argmin_criterion(features: &[usize], values: &[f64]) -> Result<usize, SelectionError> {
    pick(features, values, |cand, best| cand < best)
}

fn pick(
    features: &[usize],
    values: &[f64],
    better: impl Fn(f64, f64) -> bool,
) -> Result<usize, SelectionError> {
    let mut best: Option<(usize, f64)> = None;
    for (&f, &v) in features.iter().zip(values) {
        best = match best {
            None => Some((f, v)),
            Some((bf, bv)) if better(v, bv) || (v == bv && f < bf) => Some((f, v)),
            keep => keep,
        };
    }
    best.map(|(f, _)| f).ok_or(SelectionError::EmptyVector)
}

/// Squared weight summed over the class models, per active feature.
pub fn squared_weight_scores(ms: &LinearModelSet) -> Vec<f64> {
    (0..ms.n_features())
        .map(|j| ms.models.iter().map(|m| m.w[j] * m.w[j]).sum())
        .collect()
}

/// How the second derivative is compared against the rolling deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopInequality {
    /// Fire when `|d2| > sigma * std`.
    #[default]
    Exceeds,
    /// Fire when `|d2| < sigma * std`.
    Below,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BetaCriterion {
    pub sigma: f64,
    pub psi: usize,
    pub warmup: usize,
    pub inequality: StopInequality,
}

impl Default for BetaCriterion {
    fn default() -> Self {
        BetaCriterion {
            sigma: 5.0,
            psi: 10,
            warmup: 5,
            inequality: StopInequality::Exceeds,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingPolicy {
    FixedSize { target: usize },
    BetaCriterion(BetaCriterion),
}

impl StoppingPolicy {
    pub fn validate(&self, initial_features: usize) -> Result<(), SelectionError> {
        match *self {
            StoppingPolicy::FixedSize { target } => {
                if target == 0 || target >= initial_features {
                    return Err(SelectionError::InvalidPolicy(format!(
                        "target size {target} must lie in [1, {initial_features})"
                    )));
                }
            }
            StoppingPolicy::BetaCriterion(c) => {
                if !(c.sigma >= 1.0 && c.sigma.is_finite()) {
                    return Err(SelectionError::InvalidPolicy(
                        "sigma must be at least 1".into(),
                    ));
                }
                if c.psi < 3 {
                    return Err(SelectionError::InvalidPolicy(
                        "psi must be at least 3".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

impl FromStr for StoppingPolicy {
    type Err = SelectionError;

    /// `fixed:<t>` or `beta` (default criterion parameters).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "beta" {
            return Ok(StoppingPolicy::BetaCriterion(BetaCriterion::default()));
        }
        s.strip_prefix("fixed:")
            .and_then(|t| t.parse().ok())
            .map(|target| StoppingPolicy::FixedSize { target })
            .ok_or_else(|| SelectionError::InvalidPolicy(format!("unrecognised stop rule `{s}`")))
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn population_std(v: &[f64]) -> f64 {
    let mu = mean(v);
    (v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Latest discrete second derivative `f(t) - 2 f(t-1) + f(t-2)`.
pub fn second_derivative(means: &[f64]) -> Option<f64> {
    match means {
        [.., a, b, c] => Some(c - 2.0 * b + a),
        _ => None,
    }
}

/// Decides whether the latest mean triggers the β-based stop.
///
/// `means` is the full mean history including the latest value;
/// `prior_second` holds the second derivatives computed before it. The
/// deviation is taken over the last `psi` prior values. Returns `false`
/// while `means.len() <= warmup` or with fewer than two prior values. A
/// zero deviation is floored at `1e-9 * max(1, |latest mean|)`.
pub fn beta_stop_check(means: &[f64], prior_second: &[f64], criterion: &BetaCriterion) -> bool {
    let Some(d2) = second_derivative(means) else {
        return false;
    };
    if means.len() <= criterion.warmup {
        return false;
    }
    let window = &prior_second[prior_second.len().saturating_sub(criterion.psi)..];
    if window.len() < 2 {
        return false;
    }
    let spread = criterion.sigma * population_std(window);
    match criterion.inequality {
        StopInequality::Exceeds => {
            let latest = *means.last().expect("non-empty");
            d2.abs() > spread.max(1e-9 * latest.abs().max(1.0))
        }
        StopInequality::Below => d2.abs() < spread.abs(),
    }
}

/// Running state of the β-based stop across iterations.
#[derive(Debug, Clone)]
pub struct BetaStopMonitor {
    criterion: BetaCriterion,
    means: Vec<f64>,
    second: Vec<f64>,
}

impl BetaStopMonitor {
    pub fn new(criterion: BetaCriterion) -> Self {
        BetaStopMonitor {
            criterion,
            means: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Records the mean of the current iteration. Returns the new second
    /// derivative (when defined) and whether the stop fires.
    pub fn observe(&mut self, mean: f64) -> (Option<f64>, bool) {
        self.means.push(mean);
        let fired = beta_stop_check(&self.means, &self.second, &self.criterion);
        let d2 = second_derivative(&self.means);
        if let Some(v) = d2 {
            self.second.push(v);
        }
        (d2, fired)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Crfe,
    Rfe,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Crfe => "crfe",
            Method::Rfe => "rfe",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = SelectionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "crfe" => Ok(Method::Crfe),
            "rfe" => Ok(Method::Rfe),
            _ => Err(SelectionError::InvalidPolicy(format!(
                "unknown method `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ReachedTargetSize,
    BetaCriterionFired,
    ExhaustedToOneFeature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub iteration: usize,
    pub removed_feature: usize,
    /// β of the removed feature (CRFE) or its squared-weight score (RFE).
    pub criterion_value: f64,
    /// Mean of the criterion over the features active in this iteration.
    pub mean_beta: f64,
    pub second_derivative: Option<f64>,
    /// Active features left after the removal.
    pub remaining_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub method: Method,
    pub initial_features: Vec<usize>,
    pub steps: Vec<SelectionStep>,
    pub final_subset: Vec<usize>,
    pub stop_reason: StopReason,
    /// Iteration (0-based) at which the loop ended.
    pub stop_iteration: usize,
}

impl SelectionTrace {
    pub fn removed(&self) -> impl Iterator<Item = usize> + '_ {
        self.steps.iter().map(|s| s.removed_feature)
    }

    /// Active features once only `size` remain, sorted. `None` if the run
    /// stopped before reaching that size.
    pub fn subset_at_size(&self, size: usize) -> Option<Vec<usize>> {
        let total = self.initial_features.len();
        if size > total || size < self.final_subset.len() {
            return None;
        }
        let dropped: Vec<usize> = self.removed().take(total - size).collect();
        let mut out: Vec<usize> = self
            .initial_features
            .iter()
            .copied()
            .filter(|f| !dropped.contains(f))
            .collect();
        out.sort_unstable();
        Some(out)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), SelectionError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "iteration",
            "removed_feature",
            "criterion_value",
            "mean_beta",
            "second_derivative",
            "remaining_count",
        ])?;
        for s in &self.steps {
            w.write_record([
                s.iteration.to_string(),
                s.removed_feature.to_string(),
                s.criterion_value.to_string(),
                s.mean_beta.to_string(),
                s.second_derivative
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
                s.remaining_count.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// JSON document with the trace and the final subset spelled by name.
    pub fn to_json(&self, feature_names: &[String]) -> Result<String, SelectionError> {
        #[derive(Serialize)]
        struct Doc<'a> {
            #[serde(flatten)]
            trace: &'a SelectionTrace,
            final_subset_names: Vec<&'a str>,
        }
        let doc = Doc {
            trace: self,
            final_subset_names: self
                .final_subset
                .iter()
                .map(|&f| feature_names.get(f).map_or("", String::as_str))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}

/// Called once per iteration with the freshly trained models, before the
/// stop decision. `active` lists the original feature indices in column order.
pub trait IterationObserver {
    fn observe(&mut self, active: &[usize], models: &LinearModelSet) -> Result<(), SelectionError>;
}

impl<F> IterationObserver for F
where
    F: FnMut(&[usize], &LinearModelSet) -> Result<(), SelectionError>,
{
    fn observe(&mut self, active: &[usize], models: &LinearModelSet) -> Result<(), SelectionError> {
        self(active, models)
    }
}

struct NoObserver;

impl IterationObserver for NoObserver {
    fn observe(&mut self, _: &[usize], _: &LinearModelSet) -> Result<(), SelectionError> {
        Ok(())
    }
}

/// Conformal recursive feature elimination.
pub fn run_crfe(
    train: &Samples,
    calib: &Samples,
    cfg: &TrainConfig,
    lambda: f64,
    stop: &StoppingPolicy,
) -> Result<SelectionTrace, SelectionError> {
    eliminate(
        Method::Crfe,
        train,
        calib,
        cfg,
        lambda,
        stop,
        &mut NoObserver,
    )
}

/// Classical elimination by minimal squared OVA weight. `calib` is not
/// used for ranking; it is accepted so both selectors share a signature.
pub fn run_rfe(
    train: &Samples,
    calib: &Samples,
    cfg: &TrainConfig,
    stop: &StoppingPolicy,
) -> Result<SelectionTrace, SelectionError> {
    eliminate(Method::Rfe, train, calib, cfg, 0.5, stop, &mut NoObserver)
}

/// Shared elimination loop. Each iteration trains on the active features,
/// reports to `observer`, checks the stop conditions and otherwise drops
/// one feature.
pub fn eliminate(
    method: Method,
    train: &Samples,
    calib: &Samples,
    cfg: &TrainConfig,
    lambda: f64,
    stop: &StoppingPolicy,
    observer: &mut dyn IterationObserver,
) -> Result<SelectionTrace, SelectionError> {
    let l = train.n_features();
    if l < 2 {
        return Err(SelectionError::TooFewFeatures(l));
    }
    if calib.n_features() != l {
        return Err(SelectionError::DimensionMismatch {
            expected: l,
            found: calib.n_features(),
        });
    }
    stop.validate(l)?;
    let initial: Vec<usize> = (0..l).collect();
    let mut active = initial.clone();
    let mut steps = Vec::new();
    let mut monitor = match stop {
        StoppingPolicy::BetaCriterion(c) => Some(BetaStopMonitor::new(*c)),
        StoppingPolicy::FixedSize { .. } => None,
    };
    let mut iteration = 0;

    let stop_reason = loop {
        let train_x = train.x.select(Axis(1), &active);
        let models = train_ova_on(
            &train_x,
            &train.y,
            train.n_classes,
            cfg,
            lambda,
            active.clone(),
        )?;
        observer.observe(&active, &models)?;

        if let StoppingPolicy::FixedSize { target } = stop {
            if active.len() == *target {
                break StopReason::ReachedTargetSize;
            }
        }
        if active.len() == 1 {
            break StopReason::ExhaustedToOneFeature;
        }

        let (values, removed) = match method {
            Method::Crfe => {
                let calib_x = calib.x.select(Axis(1), &active);
                let beta = beta_measures(&models, &calib_x, &calib.y)?;
                let j = argmax_beta(&beta)?;
                (beta.values, j)
            }
            Method::Rfe => {
                let scores = squared_weight_scores(&models);
                let j = argmin_criterion(&active, &scores)?;
                (scores, j)
            }
        };
        let mean_value = mean(&values);
        let (d2, fired) = match monitor.as_mut() {
            Some(m) => m.observe(mean_value),
            None => (None, false),
        };
        if fired {
            break StopReason::BetaCriterionFired;
        }

        let pos = active
            .iter()
            .position(|&f| f == removed)
            .expect("picked from active");
        active.remove(pos);
        steps.push(SelectionStep {
            iteration,
            removed_feature: removed,
            criterion_value: values[pos],
            mean_beta: mean_value,
            second_derivative: d2,
            remaining_count: active.len(),
        });
        iteration += 1;
    };

    Ok(SelectionTrace {
        method,
        initial_features: initial,
        steps,
        final_subset: active,
        stop_reason,
        stop_iteration: iteration,
    })
}
