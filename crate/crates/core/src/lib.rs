//! Conformal recursive feature elimination.
//!
//! The crate builds inductive conformal predictors on top of one-vs-all
//! linear classifiers and uses the feature-separable form of their
//! non-conformity score to rank features for backward elimination.
//!
//! Module map:
//!
//! * [`data`]: datasets, CSV ingestion, k-NN imputation, scaling, seeded
//!   splits and a synthetic multiclass generator.
//! * [`classifier`]: hinge-loss linear models trained by averaged stochastic
//!   subgradient descent, and the one-vs-all wrapper.
//! * [`conformal`]: non-conformity scores, calibration, p-values and
//!   prediction sets.
//! * [`crfe`]: β-measures, the elimination loop, the β-based stopping rule
//!   and the classical squared-weight RFE baseline.
//! * [`metrics`]: set-prediction and point-prediction metrics.
//! * [`consistency`]: Jaccard, weighted majority and Kuncheva indices.
//! * [`harness`]: multi-seed experiments, benchmark tables and report files.
//!
//! ```
//! use crfe_core::classifier::{train_ova, TrainConfig};
//! use crfe_core::conformal::{calibrate, prediction_set};
//! use crfe_core::data::{generate_synthetic, split, SyntheticSpec};
//!
//! let spec = SyntheticSpec { n_samples: 120, n_features: 6, n_informative: 3,
//!     n_redundant: 0, n_classes: 3, class_sep: 2.0, flip_y: 0.0, seed: 7 };
//! let (data, _meta) = generate_synthetic(&spec).unwrap();
//! let parts = split(&data, 7).unwrap();
//! let train = data.samples(&parts.train_idx);
//! let calib = data.samples(&parts.calib_idx);
//! let cfg = TrainConfig { epochs: 20, ..TrainConfig::default() };
//! let models = train_ova(&train.x, &train.y, data.n_classes(), &cfg, 0.5).unwrap();
//! let record = calibrate(&models, &calib.x, &calib.y).unwrap();
//! let set = prediction_set(&models, &record, data.x.row(parts.test_idx[0]), 0.1).unwrap();
//! assert_eq!(set.p_values.len(), 3);
//! ```

pub mod classifier;
pub mod conformal;
pub mod consistency;
pub mod crfe;
pub mod data;
pub mod harness;
pub mod metrics;
mod plot;
mod rng;

pub use classifier::{LinearModel, LinearModelSet, TrainConfig};
pub use conformal::{CalibrationRecord, PredictionSet};
pub use crfe::{BetaVector, SelectionTrace, StopReason, StoppingPolicy};
pub use data::{DataSplit, Dataset, Samples, Scaler, SyntheticSpec};
