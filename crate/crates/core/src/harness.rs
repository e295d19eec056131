//! Multi-seed experiments: selector comparison over subset sizes, the
//! stopping-rule benchmark, subset consistency, and report files.
//!
//! Repeat `r` uses seed `master_seed + r` for its split and models, and
//! both selectors always see the same split. Repeats run in parallel, but
//! results are merged in a fixed order so the emitted files do not depend
//! on scheduling.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{
    ova_labels, train_binary, train_ova_on, LinearModel, LinearModelSet, TrainConfig, TrainError,
};
use crate::conformal::{ConformalError, ConformalPredictor};
use crate::consistency::{
    jaccard, jaccard_multi, kuncheva, mean_std, weighted_consistency, ConsistencyError,
    SubsetFamily,
};
use crate::crfe::{
    eliminate, BetaCriterion, IterationObserver, Method, SelectionError, SelectionTrace,
    StopReason, StoppingPolicy,
};
use crate::data::{
    fit_scaler, generate_synthetic, impute_knn, load_csv_with, split_covering_classes, DataError,
    DataSplit, Dataset, LoadOptions, Samples, SyntheticMeta, SyntheticSpec,
    DEFAULT_IMPUTATION_NEIGHBORS,
};
use crate::metrics::{
    point_metrics, set_metrics, MetricsError, PointMetricsReport, SetMetricsReport,
};
use crate::plot::{line_chart, Series};
use crate::rng;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Where the experiment's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic {
        spec: SyntheticSpec,
        /// Draw a fresh dataset per repeat with generator seed
        /// `spec.seed + r` instead of one dataset for all repeats.
        #[serde(default)]
        reseed_per_repeat: bool,
    },
    Csv {
        path: PathBuf,
        label_column: String,
        #[serde(default)]
        missing_token: String,
    },
}

impl DatasetSource {
    /// Short name used in report rows.
    pub fn label(&self) -> String {
        match self {
            DatasetSource::Synthetic { .. } => "synthetic".into(),
            DatasetSource::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "data".into()),
        }
    }
}

/// Parameters of the stopping benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoppingConfig {
    #[serde(flatten)]
    pub criterion: BetaCriterion,
    pub repeats: usize,
    /// Folds of the cross-validated accuracy stop used for RFE.
    pub cv_folds: usize,
}

impl Default for StoppingConfig {
    fn default() -> Self {
        StoppingConfig {
            criterion: BetaCriterion::default(),
            repeats: 50,
            cv_folds: 5,
        }
    }
}

fn default_epsilon() -> f64 {
    0.1
}

fn default_lambda() -> f64 {
    0.5
}

fn default_repeats() -> usize {
    20
}

fn default_selectors() -> Vec<Method> {
    vec![Method::Crfe, Method::Rfe]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_selectors")]
    pub selectors: Vec<Method>,
    /// Subset sizes to evaluate, strictly decreasing. Defaults to every size
    /// from `l - 1` down to 1.
    #[serde(default)]
    pub sizes: Option<Vec<usize>>,
    #[serde(default)]
    pub stopping: StoppingConfig,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetSource) -> Self {
        ExperimentConfig {
            dataset,
            epsilon: default_epsilon(),
            lambda: default_lambda(),
            train: TrainConfig::default(),
            repeats: default_repeats(),
            master_seed: 0,
            selectors: default_selectors(),
            sizes: None,
            stopping: StoppingConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if self.repeats == 0 {
            return bad("repeats must be at least 1");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if self.selectors.is_empty() {
            return bad("no selectors given");
        }
        let mut seen = self.selectors.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.selectors.len() {
            return bad("selectors listed twice");
        }
        if let Some(sizes) = &self.sizes {
            if sizes.is_empty() || sizes.contains(&0) {
                return bad("sizes must be non-empty and positive");
            }
            if sizes.windows(2).any(|w| w[0] <= w[1]) {
                return bad("sizes must be strictly decreasing");
            }
        }
        if self.stopping.repeats == 0 {
            return bad("stopping repeats must be at least 1");
        }
        if self.stopping.cv_folds < 2 {
            return bad("cv_folds must be at least 2");
        }
        self.train
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if let DatasetSource::Synthetic { spec, .. } = &self.dataset {
            spec.validate()
                .map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        StoppingPolicy::BetaCriterion(self.stopping.criterion)
            .validate(usize::MAX)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    /// The dataset used by repeat `r`, with generator metadata for
    /// synthetic sources. Missing cells of CSV data are imputed.
    pub fn dataset_for_repeat(
        &self,
        r: usize,
    ) -> Result<(Dataset, Option<SyntheticMeta>), HarnessError> {
        match &self.dataset {
            DatasetSource::Synthetic {
                spec,
                reseed_per_repeat,
            } => {
                let mut spec = spec.clone();
                if *reseed_per_repeat {
                    spec.seed = spec.seed.wrapping_add(r as u64);
                }
                let (d, meta) = generate_synthetic(&spec)?;
                Ok((d, Some(meta)))
            }
            DatasetSource::Csv {
                path,
                label_column,
                missing_token,
            } => {
                let opts = LoadOptions {
                    missing_token: missing_token.clone(),
                    ..LoadOptions::new(label_column.clone())
                };
                let d = load_csv_with(path, &opts)?;
                let d = if d.has_missing() {
                    impute_knn(&d, DEFAULT_IMPUTATION_NEIGHBORS)?
                } else {
                    d
                };
                Ok((d, None))
            }
        }
    }

    pub fn repeat_seed(&self, r: usize) -> u64 {
        self.master_seed.wrapping_add(r as u64)
    }

    fn sizes_for(&self, l: usize) -> Result<Vec<usize>, HarnessError> {
        match &self.sizes {
            None => Ok((1..l).rev().collect()),
            Some(s) if s[0] >= l => Err(HarnessError::Config(format!(
                "size {} is not below the {l} available features",
                s[0]
            ))),
            Some(s) => Ok(s.clone()),
        }
    }
}

/// Datasets for all repeats; one shared copy unless the source reseeds.
struct Sources {
    fixed: Option<(Dataset, Option<SyntheticMeta>)>,
}

impl Sources {
    fn new(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        let per_repeat = matches!(
            cfg.dataset,
            DatasetSource::Synthetic {
                reseed_per_repeat: true,
                ..
            }
        );
        let fixed = if per_repeat {
            None
        } else {
            Some(cfg.dataset_for_repeat(0)?)
        };
        Ok(Sources { fixed })
    }

    fn get(&self, cfg: &ExperimentConfig, r: usize) -> Result<Dataset, HarnessError> {
        match &self.fixed {
            Some((d, _)) => Ok(d.clone()),
            None => Ok(cfg.dataset_for_repeat(r)?.0),
        }
    }
}

/// Scaled train, calibration and test parts of one repeat.
pub struct PreparedSplit {
    pub split: DataSplit,
    /// Seed that produced the split after any class-coverage retries.
    pub split_seed: u64,
    pub train: Samples,
    pub calib: Samples,
    pub test: Samples,
}

/// Splits with class-coverage retries and standardizes with training-row
/// statistics.
pub fn prepare_split(d: &Dataset, seed: u64) -> Result<PreparedSplit, HarnessError> {
    let (split, split_seed) = split_covering_classes(d, seed)?;
    let scaled = fit_scaler(d, &split.train_idx)?.apply(d);
    Ok(PreparedSplit {
        train: scaled.samples(&split.train_idx),
        calib: scaled.samples(&split.calib_idx),
        test: scaled.samples(&split.test_idx),
        split,
        split_seed,
    })
}

/// Names of the metric columns, in report order.
pub const METRIC_NAMES: [&str; 9] = [
    "coverage",
    "inefficiency",
    "certainty",
    "uncertainty",
    "mistrust",
    "accuracy",
    "macro_precision",
    "macro_recall",
    "macro_f1",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub subset_size: usize,
    pub seed: u64,
    pub set: SetMetricsReport,
    pub point: PointMetricsReport,
}

impl ResultRow {
    /// Values in [`METRIC_NAMES`] order.
    pub fn values(&self) -> [f64; 9] {
        let (s, p) = (&self.set, &self.point);
        [
            s.coverage,
            s.inefficiency,
            s.certainty,
            s.uncertainty,
            s.mistrust,
            p.accuracy,
            p.macro_precision,
            p.macro_recall,
            p.macro_f1,
        ]
    }
}

/// Mean and population std over the seed rows of one (method, size).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub subset_size: usize,
    pub count: usize,
    pub mean: [f64; 9],
    pub std: [f64; 9],
}

impl AggregateRow {
    pub fn mean_of(&self, metric: &str) -> Option<f64> {
        METRIC_NAMES
            .iter()
            .position(|&m| m == metric)
            .map(|i| self.mean[i])
    }

    pub fn std_of(&self, metric: &str) -> Option<f64> {
        METRIC_NAMES
            .iter()
            .position(|&m| m == metric)
            .map(|i| self.std[i])
    }
}

/// Seed rows sorted by (method, size descending, seed) and their aggregates
/// in the same (method, size) order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
    pub aggregates: Vec<AggregateRow>,
}

impl ResultsTable {
    pub fn from_rows(mut rows: Vec<ResultRow>) -> Self {
        rows.sort_by(|a, b| {
            (a.method, b.subset_size, a.seed).cmp(&(b.method, a.subset_size, b.seed))
        });
        let mut groups: BTreeMap<(Method, std::cmp::Reverse<usize>), Vec<&ResultRow>> =
            BTreeMap::new();
        for r in &rows {
            groups
                .entry((r.method, std::cmp::Reverse(r.subset_size)))
                .or_default()
                .push(r);
        }
        let aggregates = groups
            .into_iter()
            .map(|((method, size), group)| {
                let mut mean = [0.0; 9];
                let mut std = [0.0; 9];
                for k in 0..9 {
                    let col: Vec<f64> = group.iter().map(|r| r.values()[k]).collect();
                    (mean[k], std[k]) = mean_std(&col);
                }
                AggregateRow {
                    method,
                    subset_size: size.0,
                    count: group.len(),
                    mean,
                    std,
                }
            })
            .collect();
        ResultsTable { rows, aggregates }
    }

    pub fn aggregate(&self, method: Method, size: usize) -> Option<&AggregateRow> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.subset_size == size)
    }
}

/// One selector's elimination path on one repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seed: u64,
    pub trace: SelectionTrace,
}

/// Output of [`run_comparison`].
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRun {
    pub table: ResultsTable,
    /// Sorted by (method, seed).
    pub traces: Vec<TraceRecord>,
    pub feature_names: Vec<String>,
    pub sizes: Vec<usize>,
    pub selectors: Vec<Method>,
}

/// Fits a conformal predictor on calibration data restricted to `active`
/// and scores the test part.
fn evaluate_models(
    models: &LinearModelSet,
    active: &[usize],
    calib: &Samples,
    test: &Samples,
    epsilon: f64,
) -> Result<(SetMetricsReport, PointMetricsReport), HarnessError> {
    let calib_x = calib.x.select(Axis(1), active);
    let test_x = test.x.select(Axis(1), active);
    let predictor = ConformalPredictor::fit(models.clone(), &calib_x, &calib.y)?;
    let sets = predictor.predict(&test_x, epsilon)?;
    let m = calib.n_classes;
    let set = set_metrics(&sets, &test.y, m)?;
    let pred = test_x
        .rows()
        .into_iter()
        .map(|row| models.predict(row))
        .collect::<Result<Vec<_>, _>>()?;
    let point = point_metrics(&pred, &test.y, m)?;
    Ok((set, point))
}

fn train_on(
    part: &Samples,
    subset: &[usize],
    cfg: &TrainConfig,
    lambda: f64,
) -> Result<LinearModelSet, HarnessError> {
    let x = part.x.select(Axis(1), subset);
    Ok(train_ova_on(
        &x,
        &part.y,
        part.n_classes,
        cfg,
        lambda,
        subset.to_vec(),
    )?)
}

fn comparison_repeat(
    cfg: &ExperimentConfig,
    sources: &Sources,
    r: usize,
) -> Result<(Vec<ResultRow>, Vec<TraceRecord>), HarnessError> {
    let seed = cfg.repeat_seed(r);
    let data = sources.get(cfg, r)?;
    let sizes = cfg.sizes_for(data.n_features())?;
    let parts = prepare_split(&data, seed)?;
    let train_cfg = cfg.train.with_seed(seed);
    let stop = StoppingPolicy::FixedSize {
        target: *sizes.last().expect("validated non-empty"),
    };
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for &method in &cfg.selectors {
        let mut failure = None;
        let mut observer =
            |active: &[usize], models: &LinearModelSet| -> Result<(), SelectionError> {
                if failure.is_some() || !sizes.contains(&active.len()) {
                    return Ok(());
                }
                match evaluate_models(models, active, &parts.calib, &parts.test, cfg.epsilon) {
                    Ok((set, point)) => rows.push(ResultRow {
                        method,
                        subset_size: active.len(),
                        seed,
                        set,
                        point,
                    }),
                    Err(e) => failure = Some(e),
                }
                Ok(())
            };
        let trace = eliminate(
            method,
            &parts.train,
            &parts.calib,
            &train_cfg,
            cfg.lambda,
            &stop,
            &mut observer as &mut dyn IterationObserver,
        )?;
        if let Some(e) = failure {
            return Err(e);
        }
        traces.push(TraceRecord { seed, trace });
    }
    Ok((rows, traces))
}

/// Runs every selector down to the smallest configured size on each repeat
/// and evaluates set and point metrics at every configured size.
pub fn run_comparison(cfg: &ExperimentConfig) -> Result<ComparisonRun, HarnessError> {
    cfg.validate()?;
    let sources = Sources::new(cfg)?;
    let first = sources.get(cfg, 0)?;
    let sizes = cfg.sizes_for(first.n_features())?;
    let outcomes = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| comparison_repeat(cfg, &sources, r))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for (r, t) in outcomes {
        rows.extend(r);
        traces.extend(t);
    }
    traces.sort_by_key(|t| (t.trace.method, t.seed));
    Ok(ComparisonRun {
        table: ResultsTable::from_rows(rows),
        traces,
        feature_names: first.feature_names,
        sizes,
        selectors: cfg.selectors.clone(),
    })
}

/// Stratified fold ids for `y`: each class is shuffled and dealt round
/// robin, continuing the count across classes.
fn stratified_folds(y: &[usize], n_classes: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng::seeded(seed);
    let mut fold_of = vec![0; y.len()];
    let mut next = 0;
    for c in 0..n_classes {
        let mut members: Vec<usize> = (0..y.len()).filter(|&i| y[i] == c).collect();
        members.shuffle(&mut rng);
        for i in members {
            fold_of[i] = next % folds;
            next += 1;
        }
    }
    fold_of
}

/// OVA models for one fold. A class that is absent from (or makes up all
/// of) the fold's training rows gets a constant model voting `-1` (`+1`).
fn fold_models(
    x: &ndarray::Array2<f64>,
    y: &[usize],
    n_classes: usize,
    cfg: &TrainConfig,
) -> Result<LinearModelSet, HarnessError> {
    let dim = x.ncols();
    let models = (0..n_classes)
        .map(|k| {
            let labels = ova_labels(y, k);
            let pos = labels.iter().filter(|&&v| v > 0.0).count();
            if pos == 0 || pos == labels.len() {
                let b = if pos == 0 { -1.0 } else { 1.0 };
                return Ok(LinearModel {
                    w: vec![0.0; dim],
                    b,
                });
            }
            train_binary(
                x.view(),
                &labels,
                &cfg.with_seed(rng::derive(cfg.seed, k as u64)),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LinearModelSet::new(models, (0..dim).collect(), 0.5)?)
}

/// Mean fold accuracy of argmax OVA predictions using columns `active`.
fn cv_accuracy(
    train: &Samples,
    active: &[usize],
    fold_of: &[usize],
    folds: usize,
    cfg: &TrainConfig,
) -> Result<f64, HarnessError> {
    let x = train.x.select(Axis(1), active);
    let mut total = 0.0;
    for f in 0..folds {
        let fit_rows: Vec<usize> = (0..train.len()).filter(|&i| fold_of[i] != f).collect();
        let val_rows: Vec<usize> = (0..train.len()).filter(|&i| fold_of[i] == f).collect();
        let fit_y: Vec<usize> = fit_rows.iter().map(|&i| train.y[i]).collect();
        let models = fold_models(&x.select(Axis(0), &fit_rows), &fit_y, train.n_classes, cfg)?;
        let mut correct = 0usize;
        for &i in &val_rows {
            if models.predict(x.row(i))? == train.y[i] {
                correct += 1;
            }
        }
        total += correct as f64 / val_rows.len() as f64;
    }
    Ok(total / folds as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingRun {
    pub method: Method,
    pub seed: u64,
    pub selected: Vec<usize>,
    /// Stop reason of the β rule; `None` for the cross-validated stop.
    pub stop_reason: Option<StopReason>,
    /// Elimination iteration at which the run ended (β rule only).
    pub stop_iteration: Option<usize>,
    pub set: SetMetricsReport,
    /// Same split and models evaluated on all features.
    pub full_set: SetMetricsReport,
}

impl StoppingRun {
    pub fn size(&self) -> usize {
        self.selected.len()
    }
}

/// Table row: averages over the runs of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingSummary {
    pub dataset: String,
    pub method: Method,
    pub stop_rule: String,
    pub runs: usize,
    pub size_mean: f64,
    pub size_std: f64,
    pub inefficiency_mean: f64,
    pub inefficiency_std: f64,
    pub certainty_mean: f64,
    pub certainty_std: f64,
    pub full_inefficiency_mean: f64,
    pub full_certainty_mean: f64,
    /// Fraction of runs in which the β rule fired (β rule only).
    pub fired_fraction: Option<f64>,
}

/// How often each feature was kept, per method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFrequency {
    pub feature: usize,
    pub name: String,
    /// Aligned with [`StoppingReport::selectors`].
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingReport {
    pub selectors: Vec<Method>,
    /// Sorted by (method, seed).
    pub runs: Vec<StoppingRun>,
    pub summary: Vec<StoppingSummary>,
    pub frequencies: Vec<FeatureFrequency>,
}

fn stopping_repeat(
    cfg: &ExperimentConfig,
    sources: &Sources,
    r: usize,
) -> Result<Vec<StoppingRun>, HarnessError> {
    let seed = cfg.repeat_seed(r);
    let data = sources.get(cfg, r)?;
    let l = data.n_features();
    let parts = prepare_split(&data, seed)?;
    let train_cfg = cfg.train.with_seed(seed);
    let all: Vec<usize> = (0..l).collect();
    let full_models = train_on(&parts.train, &all, &train_cfg, cfg.lambda)?;
    let (full_set, _) =
        evaluate_models(&full_models, &all, &parts.calib, &parts.test, cfg.epsilon)?;

    let mut runs = Vec::new();
    for &method in &cfg.selectors {
        let (selected, stop_reason, stop_iteration) = match method {
            Method::Crfe => {
                let stop = StoppingPolicy::BetaCriterion(cfg.stopping.criterion);
                let trace = eliminate(
                    method,
                    &parts.train,
                    &parts.calib,
                    &train_cfg,
                    cfg.lambda,
                    &stop,
                    &mut |_: &[usize], _: &LinearModelSet| Ok(()),
                )?;
                (
                    trace.final_subset,
                    Some(trace.stop_reason),
                    Some(trace.stop_iteration),
                )
            }
            Method::Rfe => {
                let folds = cfg.stopping.cv_folds;
                if parts.train.len() < folds {
                    return Err(HarnessError::Config(format!(
                        "{folds} folds need at least {folds} training rows"
                    )));
                }
                let fold_of = stratified_folds(
                    &parts.train.y,
                    parts.train.n_classes,
                    folds,
                    rng::derive(seed, 0xcf),
                );
                let mut scores: Vec<(usize, f64)> = Vec::new();
                let mut failure = None;
                let mut observer =
                    |active: &[usize], _: &LinearModelSet| -> Result<(), SelectionError> {
                        if failure.is_none() {
                            match cv_accuracy(&parts.train, active, &fold_of, folds, &train_cfg) {
                                Ok(acc) => scores.push((active.len(), acc)),
                                Err(e) => failure = Some(e),
                            }
                        }
                        Ok(())
                    };
                let trace = eliminate(
                    method,
                    &parts.train,
                    &parts.calib,
                    &train_cfg,
                    cfg.lambda,
                    &StoppingPolicy::FixedSize { target: 1 },
                    &mut observer as &mut dyn IterationObserver,
                )?;
                if let Some(e) = failure {
                    return Err(e);
                }
                // sizes arrive in decreasing order, so a strict `>` keeps the
                // larger size on ties
                let mut best = scores[0];
                for &s in &scores[1..] {
                    if s.1 > best.1 {
                        best = s;
                    }
                }
                let subset = trace
                    .subset_at_size(best.0)
                    .expect("path reaches every size");
                (subset, None, None)
            }
        };
        let models = train_on(&parts.train, &selected, &train_cfg, cfg.lambda)?;
        let (set, _) = evaluate_models(&models, &selected, &parts.calib, &parts.test, cfg.epsilon)?;
        runs.push(StoppingRun {
            method,
            seed,
            selected,
            stop_reason,
            stop_iteration,
            set,
            full_set,
        });
    }
    Ok(runs)
}

/// Stops CRFE with the β rule and RFE at the size of best cross-validated
/// training accuracy, over `stopping.repeats` splits.
pub fn run_stopping_benchmark(cfg: &ExperimentConfig) -> Result<StoppingReport, HarnessError> {
    cfg.validate()?;
    let sources = Sources::new(cfg)?;
    let first = sources.get(cfg, 0)?;
    let outcomes = (0..cfg.stopping.repeats)
        .into_par_iter()
        .map(|r| stopping_repeat(cfg, &sources, r))
        .collect::<Result<Vec<_>, _>>()?;
    let mut runs: Vec<StoppingRun> = outcomes.into_iter().flatten().collect();
    runs.sort_by_key(|r| (r.method, r.seed));

    let dataset = cfg.dataset.label();
    let summary = cfg
        .selectors
        .iter()
        .map(|&method| {
            let mine: Vec<&StoppingRun> = runs.iter().filter(|r| r.method == method).collect();
            let col = |f: &dyn Fn(&StoppingRun) -> f64| {
                mean_std(&mine.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            let (size_mean, size_std) = col(&|r| r.size() as f64);
            let (inefficiency_mean, inefficiency_std) = col(&|r| r.set.inefficiency);
            let (certainty_mean, certainty_std) = col(&|r| r.set.certainty);
            let fired = mine
                .iter()
                .filter(|r| r.stop_reason == Some(StopReason::BetaCriterionFired))
                .count();
            StoppingSummary {
                dataset: dataset.clone(),
                method,
                stop_rule: match method {
                    Method::Crfe => "beta".into(),
                    Method::Rfe => "cv_accuracy".into(),
                },
                runs: mine.len(),
                size_mean,
                size_std,
                inefficiency_mean,
                inefficiency_std,
                certainty_mean,
                certainty_std,
                full_inefficiency_mean: col(&|r| r.full_set.inefficiency).0,
                full_certainty_mean: col(&|r| r.full_set.certainty).0,
                fired_fraction: (method == Method::Crfe).then(|| fired as f64 / mine.len() as f64),
            }
        })
        .collect();

    let frequencies = first
        .feature_names
        .iter()
        .enumerate()
        .map(|(j, name)| FeatureFrequency {
            feature: j,
            name: name.clone(),
            counts: cfg
                .selectors
                .iter()
                .map(|&m| {
                    runs.iter()
                        .filter(|r| r.method == m && r.selected.contains(&j))
                        .count()
                })
                .collect(),
        })
        .collect();

    Ok(StoppingReport {
        selectors: cfg.selectors.clone(),
        runs,
        summary,
        frequencies,
    })
}

/// Stability of the selected subsets at one size. `scope` is a method name
/// for across-repeat statistics, or `a_vs_b` for two methods compared at
/// equal seeds (the family indices are then absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub subset_size: usize,
    pub scope: String,
    pub jaccard_index: Option<f64>,
    pub weighted_index: Option<f64>,
    pub jaccard_mean: Option<f64>,
    pub jaccard_std: Option<f64>,
    pub kuncheva_mean: Option<f64>,
    pub kuncheva_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub rows: Vec<ConsistencyRow>,
}

type MeanStd = (f64, f64);

/// `(seed, subset)` pairs of one method at one size.
type SeededSubsets = Vec<(u64, Vec<usize>)>;

fn pairwise(
    pairs: &[(&[usize], &[usize])],
    universe: usize,
) -> Result<(Option<MeanStd>, Option<MeanStd>), HarnessError> {
    if pairs.is_empty() {
        return Ok((None, None));
    }
    let mut jac = Vec::with_capacity(pairs.len());
    let mut kun = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        let a = a.iter().copied().collect();
        let b = b.iter().copied().collect();
        jac.push(jaccard(&a, &b));
        kun.push(kuncheva(&a, &b, universe)?);
    }
    Ok((Some(mean_std(&jac)), Some(mean_std(&kun))))
}

/// Subset stability from the elimination paths of a comparison run.
pub fn consistency_from(run: &ComparisonRun) -> Result<ConsistencyReport, HarnessError> {
    let universe = run.feature_names.len();
    let mut rows = Vec::new();
    for &size in &run.sizes {
        let mut by_method: Vec<(Method, SeededSubsets)> = Vec::new();
        for &method in &run.selectors {
            let subsets: SeededSubsets = run
                .traces
                .iter()
                .filter(|t| t.trace.method == method)
                .filter_map(|t| t.trace.subset_at_size(size).map(|s| (t.seed, s)))
                .collect();
            let (ji, wi) = if subsets.len() >= 2 {
                let fam =
                    SubsetFamily::new(subsets.iter().map(|(_, s)| s.iter().copied()), universe)?;
                (Some(jaccard_multi(&fam)), Some(weighted_consistency(&fam)))
            } else {
                (None, None)
            };
            let mut pairs = Vec::new();
            for i in 0..subsets.len() {
                for j in i + 1..subsets.len() {
                    pairs.push((subsets[i].1.as_slice(), subsets[j].1.as_slice()));
                }
            }
            let (jac, kun) = pairwise(&pairs, universe)?;
            rows.push(ConsistencyRow {
                subset_size: size,
                scope: method.name().into(),
                jaccard_index: ji,
                weighted_index: wi,
                jaccard_mean: jac.map(|v| v.0),
                jaccard_std: jac.map(|v| v.1),
                kuncheva_mean: kun.map(|v| v.0),
                kuncheva_std: kun.map(|v| v.1),
            });
            by_method.push((method, subsets));
        }
        for a in 0..by_method.len() {
            for b in a + 1..by_method.len() {
                let (ma, sa) = &by_method[a];
                let (mb, sb) = &by_method[b];
                let pairs: Vec<(&[usize], &[usize])> = sa
                    .iter()
                    .filter_map(|(seed, s)| {
                        sb.iter()
                            .find(|(t, _)| t == seed)
                            .map(|(_, o)| (s.as_slice(), o.as_slice()))
                    })
                    .collect();
                let (jac, kun) = pairwise(&pairs, universe)?;
                rows.push(ConsistencyRow {
                    subset_size: size,
                    scope: format!("{ma}_vs_{mb}"),
                    jaccard_index: None,
                    weighted_index: None,
                    jaccard_mean: jac.map(|v| v.0),
                    jaccard_std: jac.map(|v| v.1),
                    kuncheva_mean: kun.map(|v| v.0),
                    kuncheva_std: kun.map(|v| v.1),
                });
            }
        }
    }
    Ok(ConsistencyReport { rows })
}

/// Runs the comparison and reports the stability of its subsets.
pub fn run_consistency(
    cfg: &ExperimentConfig,
) -> Result<(ComparisonRun, ConsistencyReport), HarnessError> {
    let run = run_comparison(cfg)?;
    let report = consistency_from(&run)?;
    Ok((run, report))
}

/// Everything a `bench` run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutputs {
    pub comparison: ComparisonRun,
    pub consistency: ConsistencyReport,
    pub stopping: StoppingReport,
}

pub fn run_bench(cfg: &ExperimentConfig) -> Result<BenchOutputs, HarnessError> {
    let (comparison, consistency) = run_consistency(cfg)?;
    let stopping = run_stopping_benchmark(cfg)?;
    Ok(BenchOutputs {
        comparison,
        consistency,
        stopping,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_results_csv(table: &ResultsTable, path: impl AsRef<Path>) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["method", "subset_size", "seed", "stat"];
    header.extend(METRIC_NAMES);
    w.write_record(&header)?;
    for r in &table.rows {
        let mut rec = vec![
            r.method.to_string(),
            r.subset_size.to_string(),
            r.seed.to_string(),
            "value".into(),
        ];
        rec.extend(r.values().iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    for a in &table.aggregates {
        for (stat, vals) in [("mean", &a.mean), ("std", &a.std)] {
            let mut rec = vec![
                a.method.to_string(),
                a.subset_size.to_string(),
                String::new(),
                stat.into(),
            ];
            rec.extend(vals.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One parsed line of `results.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsLine {
    pub method: Method,
    pub subset_size: usize,
    pub seed: Option<u64>,
    pub stat: String,
    pub values: [f64; 9],
}

pub fn read_results_csv(path: impl AsRef<Path>) -> Result<Vec<ResultsLine>, HarnessError> {
    let mut rd = csv::Reader::from_path(path)?;
    let bad = |m: String| HarnessError::Config(format!("malformed results file: {m}"));
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        if rec.len() != 4 + METRIC_NAMES.len() {
            return Err(bad(format!("{} columns", rec.len())));
        }
        let mut values = [0.0; 9];
        for (k, v) in values.iter_mut().enumerate() {
            *v = rec[4 + k]
                .parse()
                .map_err(|_| bad(rec[4 + k].to_string()))?;
        }
        out.push(ResultsLine {
            method: rec[0].parse()?,
            subset_size: rec[1].parse().map_err(|_| bad(rec[1].to_string()))?,
            seed: if rec[2].is_empty() {
                None
            } else {
                Some(rec[2].parse().map_err(|_| bad(rec[2].to_string()))?)
            },
            stat: rec[3].to_string(),
            values,
        });
    }
    Ok(out)
}

pub fn write_consistency_csv(
    report: &ConsistencyReport,
    path: impl AsRef<Path>,
) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "subset_size",
        "scope",
        "jaccard_index",
        "weighted_index",
        "jaccard_mean",
        "jaccard_std",
        "kuncheva_mean",
        "kuncheva_std",
    ])?;
    for r in &report.rows {
        w.write_record([
            r.subset_size.to_string(),
            r.scope.clone(),
            opt(r.jaccard_index),
            opt(r.weighted_index),
            opt(r.jaccard_mean),
            opt(r.jaccard_std),
            opt(r.kuncheva_mean),
            opt(r.kuncheva_std),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_stopping_csv(
    report: &StoppingReport,
    path: impl AsRef<Path>,
) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "dataset",
        "method",
        "stop_rule",
        "runs",
        "size_mean",
        "size_std",
        "inefficiency_mean",
        "inefficiency_std",
        "certainty_mean",
        "certainty_std",
        "full_inefficiency_mean",
        "full_certainty_mean",
        "fired_fraction",
    ])?;
    for s in &report.summary {
        w.write_record([
            s.dataset.clone(),
            s.method.to_string(),
            s.stop_rule.clone(),
            s.runs.to_string(),
            s.size_mean.to_string(),
            s.size_std.to_string(),
            s.inefficiency_mean.to_string(),
            s.inefficiency_std.to_string(),
            s.certainty_mean.to_string(),
            s.certainty_std.to_string(),
            s.full_inefficiency_mean.to_string(),
            s.full_certainty_mean.to_string(),
            opt(s.fired_fraction),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_feature_frequency_csv(
    report: &StoppingReport,
    path: impl AsRef<Path>,
) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["feature".to_string(), "name".to_string()];
    header.extend(report.selectors.iter().map(|m| format!("{m}_count")));
    w.write_record(&header)?;
    for f in &report.frequencies {
        let mut rec = vec![f.feature.to_string(), f.name.clone()];
        rec.extend(f.counts.iter().map(usize::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `trace_<method>_<seed>.json` for every path of the run.
pub fn write_traces(run: &ComparisonRun, dir: impl AsRef<Path>) -> Result<(), HarnessError> {
    for t in &run.traces {
        let name = format!("trace_{}_{}.json", t.trace.method, t.seed);
        fs::write(
            dir.as_ref().join(name),
            t.trace.to_json(&run.feature_names)? + "\n",
        )?;
    }
    Ok(())
}

/// One `plot_<metric>_<method>.svg` per metric and method: the aggregate
/// mean against subset size with a ±1 std band.
pub fn write_plots(
    table: &ResultsTable,
    selectors: &[Method],
    dir: impl AsRef<Path>,
) -> Result<usize, HarnessError> {
    let mut written = 0;
    for &method in selectors {
        let aggs: Vec<&AggregateRow> = table
            .aggregates
            .iter()
            .filter(|a| a.method == method)
            .collect();
        let x: Vec<usize> = aggs.iter().map(|a| a.subset_size).collect();
        for (k, metric) in METRIC_NAMES.iter().enumerate() {
            let mean: Vec<f64> = aggs.iter().map(|a| a.mean[k]).collect();
            let std: Vec<f64> = aggs.iter().map(|a| a.std[k]).collect();
            let title = format!("{metric} ({method})");
            let svg = line_chart(&Series {
                title: &title,
                y_label: metric,
                x: &x,
                mean: &mean,
                std: &std,
            });
            fs::write(
                dir.as_ref().join(format!("plot_{metric}_{method}.svg")),
                svg,
            )?;
            written += 1;
        }
    }
    Ok(written)
}

/// Writes all report files of a bench run into `dir`, creating it if
/// needed: `results.csv`, `consistency.csv`, `stopping.csv`,
/// `feature_frequency.csv`, the trace JSON files and the SVG plots.
pub fn emit_outputs(out: &BenchOutputs, dir: impl AsRef<Path>) -> Result<(), HarnessError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_results_csv(&out.comparison.table, dir.join("results.csv"))?;
    write_consistency_csv(&out.consistency, dir.join("consistency.csv"))?;
    write_stopping_csv(&out.stopping, dir.join("stopping.csv"))?;
    write_feature_frequency_csv(&out.stopping, dir.join("feature_frequency.csv"))?;
    write_traces(&out.comparison, dir)?;
    write_plots(&out.comparison.table, &out.comparison.selectors, dir)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(repeats: usize) -> ExperimentConfig {
        let spec = SyntheticSpec {
            n_samples: 120,
            n_features: 6,
            n_informative: 3,
            n_redundant: 0,
            n_classes: 3,
            class_sep: 2.0,
            flip_y: 0.0,
            seed: 11,
        };
        let mut cfg = ExperimentConfig::new(DatasetSource::Synthetic {
            spec,
            reseed_per_repeat: false,
        });
        cfg.repeats = repeats;
        cfg.train.epochs = 20;
        cfg.stopping.repeats = 3;
        cfg
    }

    #[test]
    fn row_counts() {
        let run = run_comparison(&small_config(2)).unwrap();
        assert_eq!(run.table.rows.len(), 2 * 5 * 2);
        assert_eq!(run.table.aggregates.len(), 2 * 5);
        assert_eq!(run.traces.len(), 4);
        assert_eq!(run.sizes, vec![5, 4, 3, 2, 1]);
    }

    #[test]
    fn aggregates_recompute_from_rows() {
        let run = run_comparison(&small_config(3)).unwrap();
        for a in &run.table.aggregates {
            let col: Vec<f64> = run
                .table
                .rows
                .iter()
                .filter(|r| r.method == a.method && r.subset_size == a.subset_size)
                .map(|r| r.set.coverage)
                .collect();
            assert_eq!(col.len(), 3);
            assert_eq!(mean_std(&col), (a.mean[0], a.std[0]));
        }
    }

    #[test]
    fn rows_are_sorted() {
        let run = run_comparison(&small_config(2)).unwrap();
        let keys: Vec<_> = run
            .table
            .rows
            .iter()
            .map(|r| (r.method, std::cmp::Reverse(r.subset_size), r.seed))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn two_repeats_collapse_weighted_to_jaccard() {
        let (_, rep) = run_consistency(&small_config(2)).unwrap();
        for r in rep.rows.iter().filter(|r| r.jaccard_index.is_some()) {
            assert!((r.jaccard_index.unwrap() - r.weighted_index.unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn stratified_folds_balance_classes() {
        let y = [0, 0, 0, 0, 1, 1, 1, 1, 1, 2];
        let f = stratified_folds(&y, 3, 2, 4);
        for c in 0..2 {
            let in_zero = (0..y.len()).filter(|&i| y[i] == c && f[i] == 0).count();
            assert!((2..=3).contains(&in_zero));
        }
    }

    #[test]
    fn fold_models_cover_absent_class() {
        let x = ndarray::array![[1.0], [-1.0], [2.0], [-2.0]];
        let ms = fold_models(&x, &[0, 1, 0, 1], 3, &TrainConfig::default()).unwrap();
        assert_eq!(
            ms.models[2],
            LinearModel {
                w: vec![0.0],
                b: -1.0
            }
        );
    }

    #[test]
    fn stopping_report_shape() {
        let rep = run_stopping_benchmark(&small_config(1)).unwrap();
        assert_eq!(rep.summary.len(), 2);
        assert_eq!(rep.runs.len(), 6);
        for f in &rep.frequencies {
            assert!(f.counts.iter().all(|&c| c <= 3));
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config(1);
        cfg.sizes = Some(vec![3, 3]);
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
        cfg.sizes = Some(vec![9]);
        assert!(matches!(run_comparison(&cfg), Err(HarnessError::Config(_))));
        let mut cfg = small_config(1);
        cfg.epsilon = 1.0;
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_json(
            r#"{"dataset": {"csv": {"path": "a.csv", "label_column": "y"}}, "bogus": 1}"#
        )
        .is_err());
    }

    #[test]
    fn config_json_defaults() {
        let cfg = ExperimentConfig::from_json(
            r#"{"dataset": {"synthetic": {"spec": {"n_samples": 50, "n_features": 4, "n_informative": 2,
                "n_redundant": 0, "n_classes": 2, "class_sep": 1.0, "flip_y": 0.0, "seed": 1}}},
                "stopping": {"sigma": 3.0}}"#,
        )
        .unwrap();
        assert_eq!(cfg.epsilon, 0.1);
        assert_eq!(cfg.repeats, 20);
        assert_eq!(cfg.stopping.criterion.sigma, 3.0);
        assert_eq!(cfg.stopping.criterion.psi, 10);
        assert_eq!(cfg.stopping.repeats, 50);
        assert_eq!(cfg.selectors, vec![Method::Crfe, Method::Rfe]);
    }
}
