//! Datasets, ingestion, preprocessing, splitting and synthetic generation.

use std::collections::BTreeSet;
use std::fs::File;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Fraction of held-out test rows.
pub const TEST_FRACTION: f64 = 0.25;
/// Features with a larger fraction of missing cells are dropped at load time.
pub const DEFAULT_MAX_MISSING_FRACTION: f64 = 0.25;
/// Neighbour count used by the preprocessing pipeline.
pub const DEFAULT_IMPUTATION_NEIGHBORS: usize = 5;
/// Number of reseeding attempts when a split leaves a class out of training.
pub const SPLIT_RETRIES: u64 = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("label column `{0}` not present in header")]
    MissingLabelColumn(String),
    #[error("cannot parse cell at row {row}, column `{column}`: `{value}`")]
    UnparsableCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("label column has fewer than two distinct values")]
    SingleClass,
    #[error("column {column} has {available} donor rows, {needed} required")]
    NotEnoughDonors {
        column: usize,
        available: usize,
        needed: usize,
    },
    #[error("empty row set")]
    EmptyRowSet,
    #[error("dataset still contains missing values")]
    MissingValues,
    #[error("too few samples: {0}")]
    TooFewSamples(usize),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// A labelled feature matrix.
///
/// Missing cells hold `NaN` in `x` and `true` in `missing_mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    pub missing_mask: Option<Array2<bool>>,
}

/// Rows of a dataset detached from its names, e.g. a training or
/// calibration part. Unlike [`Dataset`] a class may be absent.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
    pub n_classes: usize,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    /// Keeps the listed columns, in the given order.
    pub fn columns(&self, cols: &[usize]) -> Samples {
        Samples {
            x: self.x.select(Axis(1), cols),
            y: self.y.clone(),
            n_classes: self.n_classes,
        }
    }

    pub fn rows(&self, rows: &[usize]) -> Samples {
        Samples {
            x: self.x.select(Axis(0), rows),
            y: rows.iter().map(|&r| self.y[r]).collect(),
            n_classes: self.n_classes,
        }
    }
}

impl Dataset {
    pub fn new(
        x: Array2<f64>,
        y: Vec<usize>,
        feature_names: Vec<String>,
        class_names: Vec<String>,
    ) -> Result<Self, DataError> {
        let d = Dataset {
            x,
            y,
            feature_names,
            class_names,
            missing_mask: None,
        };
        d.validate()?;
        Ok(d)
    }

    /// Builds a dataset with generated names `f0..` and `0..`.
    pub fn from_parts(x: Array2<f64>, y: Vec<usize>, n_classes: usize) -> Result<Self, DataError> {
        let feature_names = (0..x.ncols()).map(|j| format!("f{j}")).collect();
        Dataset::new(x, y, feature_names, class_labels(n_classes))
    }

    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Inconsistent(m));
        if self.x.nrows() != self.y.len() {
            return bad(format!(
                "{} rows but {} labels",
                self.x.nrows(),
                self.y.len()
            ));
        }
        if self.feature_names.len() != self.x.ncols() {
            return bad(format!(
                "{} columns but {} feature names",
                self.x.ncols(),
                self.feature_names.len()
            ));
        }
        let m = self.class_names.len();
        if m < 2 {
            return Err(DataError::SingleClass);
        }
        let mut seen = vec![false; m];
        for &c in &self.y {
            if c >= m {
                return bad(format!("class id {c} out of range for {m} classes"));
            }
            seen[c] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return bad(format!("class {c} has no samples"));
        }
        if let Some(mask) = &self.missing_mask {
            if mask.dim() != self.x.dim() {
                return bad("missing mask shape differs from data".into());
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn has_missing(&self) -> bool {
        self.missing_mask
            .as_ref()
            .is_some_and(|m| m.iter().any(|&b| b))
    }

    pub fn samples(&self, rows: &[usize]) -> Samples {
        Samples {
            x: self.x.select(Axis(0), rows),
            y: rows.iter().map(|&r| self.y[r]).collect(),
            n_classes: self.n_classes(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &c in &self.y {
            counts[c] += 1;
        }
        counts
    }

    fn is_missing(&self, i: usize, j: usize) -> bool {
        self.missing_mask.as_ref().is_some_and(|m| m[[i, j]])
    }

    /// Writes the dataset as CSV with the label column last.
    pub fn write_csv(&self, path: impl AsRef<Path>, label_column: &str) -> Result<(), DataError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.push(label_column);
        w.write_record(&header)?;
        for (i, row) in self.x.rows().into_iter().enumerate() {
            let mut rec: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(j, v)| {
                    if self.is_missing(i, j) {
                        String::new()
                    } else {
                        v.to_string()
                    }
                })
                .collect();
            rec.push(self.class_names[self.y[i]].clone());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Class names `0..m`, zero padded so that lexicographic and numeric order agree.
pub fn class_labels(m: usize) -> Vec<String> {
    let width = (m.saturating_sub(1)).to_string().len();
    (0..m).map(|c| format!("{c:0width$}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    pub label_column: String,
    /// Cell content treated as missing; the empty string by default.
    pub missing_token: String,
    /// Drop features whose missing fraction exceeds this value. `None` keeps all.
    pub max_missing_fraction: Option<f64>,
}

impl LoadOptions {
    pub fn new(label_column: impl Into<String>) -> Self {
        LoadOptions {
            label_column: label_column.into(),
            missing_token: String::new(),
            max_missing_fraction: Some(DEFAULT_MAX_MISSING_FRACTION),
        }
    }
}

pub fn load_csv(
    path: impl AsRef<Path>,
    label_column: &str,
    missing_token: &str,
) -> Result<Dataset, DataError> {
    let opts = LoadOptions {
        missing_token: missing_token.to_string(),
        ..LoadOptions::new(label_column)
    };
    load_csv_with(path, &opts)
}

pub fn load_csv_with(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(DataError::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let label_pos = header
        .iter()
        .position(|h| h == &opts.label_column)
        .ok_or_else(|| DataError::MissingLabelColumn(opts.label_column.clone()))?;
    let feature_cols: Vec<usize> = (0..header.len()).filter(|&c| c != label_pos).collect();

    let mut values = Vec::new();
    let mut mask = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        for &c in &feature_cols {
            let cell = rec.get(c).unwrap_or("").trim();
            if cell == opts.missing_token {
                values.push(f64::NAN);
                mask.push(true);
            } else {
                let v: f64 = cell.parse().map_err(|_| DataError::UnparsableCell {
                    row,
                    column: header[c].clone(),
                    value: cell.to_string(),
                })?;
                values.push(v);
                mask.push(false);
            }
        }
        labels.push(rec.get(label_pos).unwrap_or("").trim().to_string());
    }

    let class_names: Vec<String> = labels
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if class_names.len() < 2 {
        return Err(DataError::SingleClass);
    }
    let y = labels
        .iter()
        .map(|l| class_names.binary_search(l).expect("label collected above"))
        .collect::<Vec<_>>();

    let n = labels.len();
    let l = feature_cols.len();
    let x = Array2::from_shape_vec((n, l), values).expect("row width fixed by header");
    let mask = Array2::from_shape_vec((n, l), mask).expect("row width fixed by header");
    let mut keep: Vec<usize> = (0..l).collect();
    if let Some(limit) = opts.max_missing_fraction {
        keep.retain(|&j| {
            let missing = mask.column(j).iter().filter(|&&b| b).count();
            n == 0 || (missing as f64 / n as f64) <= limit
        });
    }
    let feature_names = keep
        .iter()
        .map(|&j| header[feature_cols[j]].clone())
        .collect();
    let x = x.select(Axis(1), &keep);
    let mask = mask.select(Axis(1), &keep);
    let mut d = Dataset::new(x, y, feature_names, class_names)?;
    if mask.iter().any(|&b| b) {
        d.missing_mask = Some(mask);
    }
    Ok(d)
}

/// Replaces each missing cell with the mean of its column over the `k`
/// nearest donor rows.
///
/// Distances use only features observed in both rows:
/// `sqrt(sum of squared differences / shared count)`. Rows with no shared
/// features are infinitely far. Ties go to the lower row index.
pub fn impute_knn(d: &Dataset, k: usize) -> Result<Dataset, DataError> {
    if k == 0 {
        return Err(DataError::NotEnoughDonors {
            column: 0,
            available: 0,
            needed: 0,
        });
    }
    let Some(mask) = d.missing_mask.as_ref() else {
        return Ok(d.clone());
    };
    let (n, l) = d.x.dim();
    let mut out = d.x.clone();
    for j in 0..l {
        let donors: Vec<usize> = (0..n).filter(|&r| !mask[[r, j]]).collect();
        let targets: Vec<usize> = (0..n).filter(|&r| mask[[r, j]]).collect();
        if targets.is_empty() {
            continue;
        }
        if donors.len() < k {
            return Err(DataError::NotEnoughDonors {
                column: j,
                available: donors.len(),
                needed: k,
            });
        }
        for &i in &targets {
            let mut ranked: Vec<(f64, usize)> = donors
                .iter()
                .map(|&r| (shared_distance(d, mask, i, r), r))
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let sum: f64 = ranked[..k].iter().map(|&(_, r)| d.x[[r, j]]).sum();
            out[[i, j]] = sum / k as f64;
        }
    }
    Ok(Dataset {
        x: out,
        y: d.y.clone(),
        feature_names: d.feature_names.clone(),
        class_names: d.class_names.clone(),
        missing_mask: None,
    })
}

fn shared_distance(d: &Dataset, mask: &Array2<bool>, a: usize, b: usize) -> f64 {
    let mut acc = 0.0;
    let mut shared = 0usize;
    for j in 0..d.n_features() {
        if !mask[[a, j]] && !mask[[b, j]] {
            let diff = d.x[[a, j]] - d.x[[b, j]];
            acc += diff * diff;
            shared += 1;
        }
    }
    if shared == 0 {
        f64::INFINITY
    } else {
        (acc / shared as f64).sqrt()
    }
}

/// Per-feature standardization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Estimates column means and population standard deviations on `rows`.
/// Constant columns get a standard deviation of 1.
pub fn fit_scaler(d: &Dataset, rows: &[usize]) -> Result<Scaler, DataError> {
    if rows.is_empty() {
        return Err(DataError::EmptyRowSet);
    }
    if d.has_missing() {
        return Err(DataError::MissingValues);
    }
    let sub = d.x.select(Axis(0), rows);
    let count = rows.len() as f64;
    let mut mean = Vec::with_capacity(d.n_features());
    let mut std = Vec::with_capacity(d.n_features());
    for col in sub.columns() {
        let mu = col.sum() / count;
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / count;
        let sd = var.sqrt();
        mean.push(mu);
        std.push(if sd <= 1e-12 * mu.abs().max(1.0) {
            1.0
        } else {
            sd
        });
    }
    Ok(Scaler { mean, std })
}

impl Scaler {
    pub fn transform_row(&self, row: ArrayView1<f64>) -> Array1<f64> {
        Array1::from_iter(
            row.iter()
                .zip(self.mean.iter().zip(&self.std))
                .map(|(v, (m, s))| (v - m) / s),
        )
    }

    /// Standardizes every row of `d`. Not idempotent: apply once.
    pub fn apply(&self, d: &Dataset) -> Dataset {
        let mut x = d.x.clone();
        for mut row in x.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        Dataset { x, ..d.clone() }
    }
}

pub fn apply_scaler(s: &Scaler, d: &Dataset) -> Dataset {
    s.apply(d)
}

/// Disjoint training, calibration and test row indices, each sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train_idx: Vec<usize>,
    pub calib_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

/// Part sizes for `n` rows: test is `round(n/4)` half-up and the
/// remainder is halved with the extra row going to training.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let test = (n + 2) / 4;
    let rest = n - test;
    let train = rest.div_ceil(2);
    (train, rest - train, test)
}

/// Shuffles the rows with the seeded generator and cuts them into
/// test, training and calibration parts.
pub fn split(d: &Dataset, seed: u64) -> Result<DataSplit, DataError> {
    split_rows(d.n_samples(), seed)
}

pub fn split_rows(n: usize, seed: u64) -> Result<DataSplit, DataError> {
    if n < 8 {
        return Err(DataError::TooFewSamples(n));
    }
    let (train, calib, test) = split_sizes(n);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::seeded(seed));
    let mut test_idx = perm[..test].to_vec();
    let mut train_idx = perm[test..test + train].to_vec();
    let mut calib_idx = perm[test + train..test + train + calib].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    calib_idx.sort_unstable();
    Ok(DataSplit {
        train_idx,
        calib_idx,
        test_idx,
    })
}

/// Like [`split`], but reseeds with `seed + 1, seed + 2, ...` (up to
/// [`SPLIT_RETRIES`] times) until every class has a training row.
/// Returns the split together with the seed that produced it.
pub fn split_covering_classes(d: &Dataset, seed: u64) -> Result<(DataSplit, u64), DataError> {
    for attempt in 0..=SPLIT_RETRIES {
        let s = seed.wrapping_add(attempt);
        let parts = split(d, s)?;
        let mut seen = vec![false; d.n_classes()];
        for &i in &parts.train_idx {
            seen[d.y[i]] = true;
        }
        if seen.iter().all(|&b| b) {
            return Ok((parts, s));
        }
    }
    Err(DataError::TooFewSamples(d.n_samples()))
}

/// Parameters of the synthetic multiclass generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_features: usize,
    pub n_informative: usize,
    pub n_redundant: usize,
    pub n_classes: usize,
    pub class_sep: f64,
    pub flip_y: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// 350 samples, 35 features (10 informative, 1 redundant), 4 classes.
    pub fn reference(seed: u64) -> Self {
        SyntheticSpec {
            n_samples: 350,
            n_features: 35,
            n_informative: 10,
            n_redundant: 1,
            n_classes: 4,
            class_sep: 1.5,
            flip_y: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if self.n_informative == 0 {
            return bad("n_informative must be positive");
        }
        if self.n_informative + self.n_redundant > self.n_features {
            return bad("n_informative + n_redundant exceeds n_features");
        }
        if self.n_samples < self.n_classes {
            return bad("fewer samples than classes");
        }
        if !(self.class_sep > 0.0 && self.class_sep.is_finite()) {
            return bad("class_sep must be positive");
        }
        if !(0.0..=1.0).contains(&self.flip_y) {
            return bad("flip_y must lie in [0, 1]");
        }
        if self.n_informative < 64 && (1u64 << self.n_informative) < self.n_classes as u64 {
            return bad("too few hypercube vertices for the requested classes");
        }
        Ok(())
    }
}

/// Side information about a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMeta {
    pub informative_indices: Vec<usize>,
    pub redundant_indices: Vec<usize>,
    pub spec: SyntheticSpec,
}

impl SyntheticMeta {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let file = File::create(path)?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }
}

/// Sidecar path `<stem>.meta.json` next to a data file.
pub fn meta_path(data_path: &Path) -> PathBuf {
    let stem = data_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    data_path.with_file_name(format!("{stem}.meta.json"))
}

/// Gaussian clusters around scaled hypercube vertices.
///
/// Informative features are unit-variance normals centred on a distinct
/// vertex of `{-class_sep, +class_sep}^n_informative` per class. Redundant
/// features are uniform(-1, 1) combinations of the informative ones; the
/// rest is standard-normal noise. Exactly `round(flip_y * n)` rows get a
/// uniformly drawn label. Rows and columns are shuffled afterwards.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, SyntheticMeta), DataError> {
    spec.validate()?;
    let mut rng = rng::seeded(spec.seed);
    let (n, l, inf, red, m) = (
        spec.n_samples,
        spec.n_features,
        spec.n_informative,
        spec.n_redundant,
        spec.n_classes,
    );

    let mut vertices: Vec<Vec<bool>> = Vec::with_capacity(m);
    while vertices.len() < m {
        let v: Vec<bool> = (0..inf).map(|_| rng.random::<bool>()).collect();
        if !vertices.contains(&v) {
            vertices.push(v);
        }
    }

    let mut y = Vec::with_capacity(n);
    for c in 0..m {
        let count = n / m + usize::from(c < n % m);
        y.extend(std::iter::repeat_n(c, count));
    }

    let mut x = Array2::<f64>::zeros((n, l));
    for i in 0..n {
        for (j, &bit) in vertices[y[i]].iter().enumerate() {
            let centre = if bit { spec.class_sep } else { -spec.class_sep };
            x[[i, j]] = centre + Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
    }
    let unit = Uniform::new(-1.0, 1.0).expect("valid range");
    let mix = Array2::from_shape_fn((inf, red), |_| unit.sample(&mut rng));
    let redundant = x.slice(ndarray::s![.., ..inf]).dot(&mix);
    x.slice_mut(ndarray::s![.., inf..inf + red])
        .assign(&redundant);
    for i in 0..n {
        for j in inf + red..l {
            x[[i, j]] = StandardNormal.sample(&mut rng);
        }
    }

    let flips = (spec.flip_y * n as f64).round() as usize;
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut rng);
    for &i in &rows[..flips] {
        y[i] = rng.random_range(0..m);
    }

    let mut row_perm: Vec<usize> = (0..n).collect();
    row_perm.shuffle(&mut rng);
    let mut col_perm: Vec<usize> = (0..l).collect();
    col_perm.shuffle(&mut rng);
    let x = x.select(Axis(0), &row_perm).select(Axis(1), &col_perm);
    let y: Vec<usize> = row_perm.iter().map(|&i| y[i]).collect();

    // col_perm[new] = old
    let mut informative_indices: Vec<usize> = (0..l).filter(|&c| col_perm[c] < inf).collect();
    let mut redundant_indices: Vec<usize> = (0..l)
        .filter(|&c| (inf..inf + red).contains(&col_perm[c]))
        .collect();
    informative_indices.sort_unstable();
    redundant_indices.sort_unstable();

    let d = Dataset::from_parts(x, y, m).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
    Ok((
        d,
        SyntheticMeta {
            informative_indices,
            redundant_indices,
            spec: spec.clone(),
        },
    ))
}
