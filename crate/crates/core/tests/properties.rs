use std::collections::BTreeSet;

use crfe_core::classifier::{LinearModel, LinearModelSet};
use crfe_core::conformal::{calibrate, prediction_set, CalibrationRecord};
use crfe_core::consistency::{jaccard_multi, weighted_consistency, SubsetFamily};
use crfe_core::crfe::{beta_measures, delta_nonconformity_oracle};
use crfe_core::data::{fit_scaler, split_rows, split_sizes, Dataset};
use ndarray::Array2;
use proptest::prelude::*;

/// Models and samples with small integer entries, so every score is an
/// exact dyadic sum when `lambda = 0.5` and `m - 1` is a power of two.
#[derive(Debug, Clone)]
struct Instance {
    m: usize,
    w: Vec<Vec<i32>>,
    b: Vec<i32>,
    x: Vec<Vec<i32>>,
    y: Vec<usize>,
    test: Vec<i32>,
}

impl Instance {
    fn models(&self, order: &[usize]) -> LinearModelSet {
        // class `order[k]` of the new labelling uses old model `k`
        let mut models = vec![LinearModel::zeros(0); self.m];
        for (k, &to) in order.iter().enumerate() {
            models[to] = LinearModel {
                w: self.w[k].iter().map(|&v| v as f64).collect(),
                b: self.b[k] as f64,
            };
        }
        LinearModelSet::new(models, (0..self.w[0].len()).collect(), 0.5).unwrap()
    }

    fn x(&self) -> Array2<f64> {
        let l = self.w[0].len();
        Array2::from_shape_fn((self.x.len(), l), |(i, j)| self.x[i][j] as f64)
    }
}

fn instance() -> impl Strategy<Value = Instance> {
    (
        prop::sample::select(vec![2usize, 3, 5]),
        1usize..6,
        1usize..30,
    )
        .prop_flat_map(|(m, l, n)| {
            (
                prop::collection::vec(prop::collection::vec(-5i32..=5, l), m),
                prop::collection::vec(-5i32..=5, m),
                prop::collection::vec(prop::collection::vec(-5i32..=5, l), n),
                prop::collection::vec(0..m, n),
                prop::collection::vec(-5i32..=5, l),
            )
                .prop_map(move |(w, b, x, y, test)| Instance {
                    m,
                    w,
                    b,
                    x,
                    y,
                    test,
                })
        })
}

fn family() -> impl Strategy<Value = (Vec<Vec<usize>>, usize)> {
    (2usize..8, 1usize..6, 6usize..20).prop_flat_map(|(n, kappa, s)| {
        let subset = prop::sample::subsequence((0..s).collect::<Vec<_>>(), kappa);
        (prop::collection::vec(subset, n), Just(s))
    })
}

proptest! {
    #[test]
    fn split_is_a_partition(n in 8usize..400, seed in any::<u64>()) {
        let parts = split_rows(n, seed).unwrap();
        let (tr, ca, te) = split_sizes(n);
        prop_assert_eq!((parts.train_idx.len(), parts.calib_idx.len(), parts.test_idx.len()), (tr, ca, te));
        let mut all: Vec<usize> = parts.train_idx.iter().chain(&parts.calib_idx).chain(&parts.test_idx).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn sets_shrink_as_epsilon_grows(inst in instance(), e1 in 0.0f64..0.999, e2 in 0.0f64..0.999) {
        let ms = inst.models(&(0..inst.m).collect::<Vec<_>>());
        let rec = calibrate(&ms, &inst.x(), &inst.y).unwrap();
        let t = Array2::from_shape_fn((1, inst.test.len()), |(_, j)| inst.test[j] as f64);
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let wide = prediction_set(&ms, &rec, t.row(0), lo).unwrap();
        let narrow = prediction_set(&ms, &rec, t.row(0), hi).unwrap();
        prop_assert!(narrow.labels.iter().all(|&k| wide.contains(k)));
        prop_assert_eq!(prediction_set(&ms, &rec, t.row(0), 0.0).unwrap().len(), inst.m);
    }

    #[test]
    fn relabelling_classes_permutes_p_values(inst in instance(), rot in 0usize..5) {
        let m = inst.m;
        let order: Vec<usize> = (0..m).map(|k| (k + rot) % m).collect();
        let base = inst.models(&(0..m).collect::<Vec<_>>());
        let moved = inst.models(&order);
        let y_moved: Vec<usize> = inst.y.iter().map(|&c| order[c]).collect();
        let rec = calibrate(&base, &inst.x(), &inst.y).unwrap();
        let rec_moved = calibrate(&moved, &inst.x(), &y_moved).unwrap();
        let t = Array2::from_shape_fn((1, inst.test.len()), |(_, j)| inst.test[j] as f64);
        let p = prediction_set(&base, &rec, t.row(0), 0.1).unwrap().p_values;
        let p_moved = prediction_set(&moved, &rec_moved, t.row(0), 0.1).unwrap().p_values;
        for k in 0..m {
            prop_assert_eq!(p[k], p_moved[order[k]]);
        }
    }

    #[test]
    fn shifting_every_score_keeps_p_values(
        alphas in prop::collection::vec(-1000i32..1000, 1..60),
        test in -1100i32..1100,
        shift in -500i32..500,
    ) {
        let plain = CalibrationRecord::new(alphas.iter().map(|&a| a as f64).collect()).unwrap();
        let shifted = CalibrationRecord::new(alphas.iter().map(|&a| (a + shift) as f64).collect()).unwrap();
        prop_assert_eq!(
            plain.p_value(test as f64).unwrap(),
            shifted.p_value((test + shift) as f64).unwrap()
        );
    }

    #[test]
    fn p_values_lie_on_the_rank_grid(alphas in prop::collection::vec(-10.0f64..10.0, 1..40), test in -12.0f64..12.0) {
        let n = alphas.len();
        let p = CalibrationRecord::new(alphas).unwrap().p_value(test).unwrap();
        let rank = p * (n + 1) as f64;
        prop_assert!((rank - rank.round()).abs() < 1e-9);
        prop_assert!(p >= 1.0 / (n + 1) as f64 && p <= 1.0);
    }

    #[test]
    fn beta_agrees_with_feature_deletion(inst in instance()) {
        let ms = inst.models(&(0..inst.m).collect::<Vec<_>>());
        let x = inst.x();
        let beta = beta_measures(&ms, &x, &inst.y).unwrap();
        for j in 0..x.ncols() {
            let oracle = delta_nonconformity_oracle(&ms, &x, &inst.y, j).unwrap();
            prop_assert!((beta.values[j] - oracle).abs() <= 1e-9);
        }
    }

    #[test]
    fn weighted_index_dominates_jaccard((subsets, s) in family()) {
        let fam = SubsetFamily::new(subsets, s).unwrap();
        prop_assert!(jaccard_multi(&fam) <= weighted_consistency(&fam) + 1e-12);
        prop_assert!(weighted_consistency(&fam) <= 1.0 + 1e-12);
    }

    #[test]
    fn two_subsets_collapse_to_jaccard((subsets, s) in family()) {
        let fam = SubsetFamily::new(subsets.into_iter().take(2), s).unwrap();
        prop_assert_eq!(weighted_consistency(&fam), jaccard_multi(&fam));
    }

    #[test]
    fn renaming_features_keeps_indices((subsets, s) in family(), shift in 0usize..50) {
        let renamed: Vec<BTreeSet<usize>> = subsets
            .iter()
            .map(|set| set.iter().map(|&f| (f + shift) % s + s).collect())
            .collect();
        let a = SubsetFamily::new(subsets.clone(), s).unwrap();
        let b = SubsetFamily::new(renamed, 2 * s).unwrap();
        prop_assert_eq!(jaccard_multi(&a), jaccard_multi(&b));
        prop_assert_eq!(weighted_consistency(&a), weighted_consistency(&b));
    }

    #[test]
    fn scaler_standardizes_training_rows(
        rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 3), 8..40),
        seed in any::<u64>(),
    ) {
        let n = rows.len();
        let x = Array2::from_shape_fn((n, 3), |(i, j)| rows[i][j]);
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let d = Dataset::from_parts(x, y, 2).unwrap();
        let train = split_rows(n, seed).unwrap().train_idx;
        let scaled = fit_scaler(&d, &train).unwrap().apply(&d);
        for j in 0..3 {
            let col: Vec<f64> = train.iter().map(|&i| scaled.x[[i, j]]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
            prop_assert!(mean.abs() <= 1e-10);
            let raw: Vec<f64> = train.iter().map(|&i| d.x[[i, j]]).collect();
            let constant = raw.iter().all(|&v| v == raw[0]);
            prop_assert!(constant || (var.sqrt() - 1.0).abs() <= 1e-10);
        }
    }
}
