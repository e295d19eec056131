//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use crfe_core::classifier::{train_ova, LinearModel, LinearModelSet, TrainConfig};
use crfe_core::conformal::{
    calibrate, multiclass_nonconformity, prediction_set, CalibrationRecord, ConformalPredictor,
    PredictionSet,
};
use crfe_core::consistency::{
    jaccard_multi, kuncheva, kuncheva_from_counts, weighted_consistency, SubsetFamily,
};
use crfe_core::crfe::{
    beta_measures, delta_nonconformity_oracle, BetaCriterion, Method, StopReason,
};
use crfe_core::data::{Dataset, SyntheticSpec};
use crfe_core::harness::{
    emit_outputs, prepare_split, run_bench, run_comparison, run_stopping_benchmark, DatasetSource,
    ExperimentConfig,
};
use crfe_core::metrics::set_metrics;
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * normal(rng))
}

fn random_models(rng: &mut ChaCha8Rng, m: usize, l: usize, lambda: f64) -> LinearModelSet {
    let models = (0..m)
        .map(|_| LinearModel {
            w: (0..l).map(|_| 2.0 * normal(rng)).collect(),
            b: normal(rng),
        })
        .collect();
    LinearModelSet::new(models, (0..l).collect(), lambda).unwrap()
}

fn reference_source(reseed_per_repeat: bool) -> DatasetSource {
    DatasetSource::Synthetic {
        spec: SyntheticSpec::reference(0),
        reseed_per_repeat,
    }
}

fn beta_matches_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=50);
        let l = rng.random_range(1..=20);
        let m = rng.random_range(2..=5);
        let lambda: f64 = rng.random();
        let ms = random_models(&mut rng, m, l, lambda);
        let x = random_matrix(&mut rng, n, l, 3.0);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
        let beta = beta_measures(&ms, &x, &y).unwrap();
        for j in 0..l {
            let oracle = delta_nonconformity_oracle(&ms, &x, &y, j).unwrap();
            worst = worst.max((beta.values[j] - oracle).abs());
        }
    }
    let took = start.elapsed();
    outcome(
        worst <= 1e-9 && took < Duration::from_secs(10),
        format!("max |beta - oracle| = {worst:.3e} over 1000 instances in {took:.2?}"),
    )
}

fn marginal_validity() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::new(reference_source(false));
    let (data, _) = cfg.dataset_for_repeat(0).unwrap();
    let mut covered = [0usize; 2];
    let mut total = 0usize;
    for r in 0..20 {
        let seed = cfg.repeat_seed(r);
        let parts = prepare_split(&data, seed).unwrap();
        let models = train_ova(
            &parts.train.x,
            &parts.train.y,
            4,
            &cfg.train.with_seed(seed),
            cfg.lambda,
        )
        .unwrap();
        let predictor = ConformalPredictor::fit(models, &parts.calib.x, &parts.calib.y).unwrap();
        for (k, eps) in [0.1, 0.2].into_iter().enumerate() {
            let sets = predictor.predict(&parts.test.x, eps).unwrap();
            covered[k] += sets
                .iter()
                .zip(&parts.test.y)
                .filter(|(s, &y)| s.contains(y))
                .count();
        }
        total += parts.test.len();
    }
    let c10 = covered[0] as f64 / total as f64;
    let c20 = covered[1] as f64 / total as f64;
    let took = start.elapsed();
    outcome(
        (0.85..=0.95).contains(&c10) && (0.75..=0.85).contains(&c20) && took < Duration::from_secs(120),
        format!("coverage {c10:.4} at eps 0.1, {c20:.4} at eps 0.2 over {total} test rows in {took:.2?}"),
    )
}

fn informative_recovery() -> Outcome {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::new(reference_source(true));
    cfg.sizes = Some(vec![10]);
    let run = run_comparison(&cfg).unwrap();
    let mut fraction = [0.0; 2];
    for (k, method) in [Method::Crfe, Method::Rfe].into_iter().enumerate() {
        for r in 0..cfg.repeats {
            let (_, meta) = cfg.dataset_for_repeat(r).unwrap();
            let informative = meta.unwrap().informative_indices;
            let seed = cfg.repeat_seed(r);
            let trace = &run
                .traces
                .iter()
                .find(|t| t.seed == seed && t.trace.method == method)
                .unwrap()
                .trace;
            let subset = trace.subset_at_size(10).unwrap();
            let hits = subset.iter().filter(|f| informative.contains(f)).count();
            fraction[k] += hits as f64 / informative.len() as f64;
        }
        fraction[k] /= cfg.repeats as f64;
    }
    let took = start.elapsed();
    outcome(
        fraction[0] >= 0.6 && fraction[0] >= fraction[1] && took < Duration::from_secs(600),
        format!(
            "informative fraction at size 10: crfe {:.3}, rfe {:.3} over 20 seeds in {took:.2?}",
            fraction[0], fraction[1]
        ),
    )
}

fn index_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_pair: f64 = 0.0;
    for _ in 0..500 {
        let s = rng.random_range(2..=40);
        let kappa = rng.random_range(1..=s);
        let mut draw = || {
            let mut pool: Vec<usize> = (0..s).collect();
            for i in 0..kappa {
                let j = rng.random_range(i..s);
                pool.swap(i, j);
            }
            pool[..kappa].to_vec()
        };
        let fam = SubsetFamily::new(vec![draw(), draw()], s).unwrap();
        worst_pair = worst_pair.max((weighted_consistency(&fam) - jaccard_multi(&fam)).abs());
    }
    let mut worst_self: f64 = 0.0;
    let mut worst_chance: f64 = 0.0;
    for s in 2..=60usize {
        for kappa in 1..s {
            let a: BTreeSet<usize> = (0..kappa).collect();
            worst_self = worst_self.max((kuncheva(&a, &a, s).unwrap() - 1.0).abs());
            let (k, sf) = (kappa as f64, s as f64);
            worst_chance = worst_chance.max(kuncheva_from_counts(k * k / sf, k, sf).abs());
        }
    }
    outcome(
        worst_pair <= 1e-12 && worst_self <= 1e-12 && worst_chance <= 1e-12,
        format!(
            "max |I_W - I_J| = {worst_pair:.1e} (n = 2), max |I_K(a,a) - 1| = {worst_self:.1e}, max |I_K at chance| = {worst_chance:.1e}"
        ),
    )
}

fn super_uniformity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p_values = Vec::new();
    let cfg = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    for r in 0..25u64 {
        let (n, l, m) = (400, 5, 3);
        let x = random_matrix(&mut rng, n, l, 1.0);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
        let data = Dataset::from_parts(x, y, m).unwrap();
        let parts = prepare_split(&data, r).unwrap();
        let models = train_ova(&parts.train.x, &parts.train.y, m, &cfg.with_seed(r), 0.5).unwrap();
        let predictor = ConformalPredictor::fit(models, &parts.calib.x, &parts.calib.y).unwrap();
        p_values.extend(
            predictor
                .label_p_values(&parts.test.x, &parts.test.y)
                .unwrap(),
        );
    }
    let n = p_values.len() as f64;
    let mut pass = p_values.len() >= 2000;
    let mut detail = format!("N = {}", p_values.len());
    for eps in [0.05, 0.1, 0.2] {
        let frac = p_values.iter().filter(|&&p| p <= eps).count() as f64 / n;
        let bound = eps + 3.0 * (eps * (1.0 - eps) / n).sqrt();
        pass &= frac <= bound;
        detail.push_str(&format!("; eps {eps}: {frac:.4} <= {bound:.4}"));
    }
    outcome(pass, detail)
}

fn stopping_behavior() -> Outcome {
    let mut cfg = ExperimentConfig::new(reference_source(true));
    cfg.selectors = vec![Method::Crfe];
    cfg.stopping.criterion = BetaCriterion {
        sigma: 5.0,
        ..BetaCriterion::default()
    };
    let warmup = cfg.stopping.criterion.warmup;
    let report = run_stopping_benchmark(&cfg).unwrap();
    let runs = &report.runs;
    let fired: Vec<_> = runs
        .iter()
        .filter(|r| r.stop_reason == Some(StopReason::BetaCriterionFired))
        .collect();
    let fired_fraction = fired.len() as f64 / runs.len() as f64;
    let in_warmup = fired
        .iter()
        .filter(|r| r.stop_iteration.unwrap() < warmup)
        .count();
    let s = &report.summary[0];
    let ratio = s.inefficiency_mean / s.full_inefficiency_mean;
    outcome(
        runs.len() == 50
            && fired_fraction >= 0.9
            && in_warmup == 0
            && (6.0..=20.0).contains(&s.size_mean)
            && ratio <= 1.1,
        format!(
            "fired {}/{} ({} in warmup), mean size {:.2}, inefficiency {:.4} vs full {:.4} (ratio {ratio:.3})",
            fired.len(),
            runs.len(),
            in_warmup,
            s.size_mean,
            s.inefficiency_mean,
            s.full_inefficiency_mean
        ),
    )
}

fn set_structure() -> Outcome {
    // full sets at epsilon 0 on real predictions
    let cfg = ExperimentConfig::new(reference_source(false));
    let (data, _) = cfg.dataset_for_repeat(0).unwrap();
    let parts = prepare_split(&data, 0).unwrap();
    let models = train_ova(&parts.train.x, &parts.train.y, 4, &cfg.train, 0.5).unwrap();
    let predictor = ConformalPredictor::fit(models, &parts.calib.x, &parts.calib.y).unwrap();
    let full = predictor
        .predict(&parts.test.x, 0.0)
        .unwrap()
        .iter()
        .all(|s| s.len() == 4);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0;
    let mut empty_at_zero = 0;
    for _ in 0..1000 {
        let m = rng.random_range(2..=5);
        let l = rng.random_range(1..=10);
        let n = rng.random_range(1..=50);
        let lambda: f64 = rng.random();
        let ms = random_models(&mut rng, m, l, lambda);
        let x = random_matrix(&mut rng, n, l, 2.0);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
        let rec = calibrate(&ms, &x, &y).unwrap();
        let t = random_matrix(&mut rng, 1, l, 2.0);
        let mut eps = [rng.random::<f64>() * 0.999, rng.random::<f64>() * 0.999];
        eps.sort_by(f64::total_cmp);
        let wide = prediction_set(&ms, &rec, t.row(0), eps[0]).unwrap();
        let narrow = prediction_set(&ms, &rec, t.row(0), eps[1]).unwrap();
        if !narrow.labels.iter().all(|&k| wide.contains(k)) {
            violations += 1;
        }
        if prediction_set(&ms, &rec, t.row(0), 0.0).unwrap().len() != m {
            empty_at_zero += 1;
        }
    }
    outcome(
        full && violations == 0 && empty_at_zero == 0,
        format!(
            "eps 0 full on synthetic test set: {full}; nesting violations {violations}/1000; non-full eps-0 sets {empty_at_zero}/1000"
        ),
    )
}

fn golden_fixtures() -> Outcome {
    let mut failed = Vec::new();

    let ms = LinearModelSet::new(
        [1.0, -0.5, 0.2]
            .iter()
            .map(|&b| LinearModel { w: vec![0.0], b })
            .collect(),
        vec![0],
        0.5,
    )
    .unwrap();
    let alpha = multiclass_nonconformity(&ms, array![1.0].view(), 0).unwrap();
    if (alpha - -0.575).abs() > 1e-15 {
        failed.push(format!("alpha {alpha}"));
    }

    let rec = CalibrationRecord::new(vec![0.1, 0.2, 0.3]).unwrap();
    let ps = [
        rec.p_value(0.25).unwrap(),
        rec.p_value(0.9).unwrap(),
        rec.p_value(-1.0).unwrap(),
    ];
    if ps != [0.5, 0.25, 1.0] {
        failed.push(format!("p-values {ps:?}"));
    }

    let binary = LinearModelSet::new(
        vec![
            LinearModel {
                w: vec![2.0],
                b: 0.3,
            },
            LinearModel {
                w: vec![-2.0],
                b: -0.3,
            },
        ],
        vec![0],
        1.0,
    )
    .unwrap();
    let beta = beta_measures(&binary, &array![[1.0], [3.0]], &[0, 1]).unwrap();
    if beta.values != [4.0] {
        failed.push(format!("beta {:?}", beta.values));
    }

    let set = |labels: &[usize]| PredictionSet {
        labels: labels.to_vec(),
        p_values: vec![],
        epsilon: 0.1,
    };
    let r = set_metrics(&[set(&[0]), set(&[0, 1]), set(&[])], &[0, 1, 1], 2).unwrap();
    let third = 1.0 / 3.0;
    if [
        r.coverage,
        r.inefficiency,
        r.certainty,
        r.uncertainty,
        r.mistrust,
    ] != [2.0 * third, 1.0, third, third, third]
    {
        failed.push(format!("set metrics {r:?}"));
    }

    let fam = SubsetFamily::new(vec![vec![1, 2], vec![1, 2], vec![1, 3]], 4).unwrap();
    let iw = weighted_consistency(&fam);
    if (iw - 7.0 / 15.0).abs() > 1e-15 {
        failed.push(format!("I_W {iw}"));
    }

    let a: BTreeSet<usize> = [0, 1, 2, 3, 4].into();
    let b: BTreeSet<usize> = [0, 1, 2, 7, 8].into();
    let ik = kuncheva(&a, &b, 10).unwrap();
    if ik != 0.2 {
        failed.push(format!("Kuncheva {ik}"));
    }

    let pass = failed.is_empty();
    let detail = if pass {
        "alpha -0.575, p-values (0.5, 0.25, 1), beta 4, set metrics, I_W 7/15, Kuncheva 0.2".into()
    } else {
        format!("mismatches: {}", failed.join(", "))
    };
    outcome(pass, detail)
}

fn bench_determinism() -> Outcome {
    let mut cfg = ExperimentConfig::new(reference_source(false));
    cfg.repeats = 3;
    cfg.stopping.repeats = 3;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        emit_outputs(&run_bench(&cfg).unwrap(), d.path()).unwrap();
    }
    let mut names: Vec<String> = fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let csvs = names.iter().filter(|n| n.ends_with(".csv")).count();
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| fs::read(dirs[0].path().join(n)).ok() != fs::read(dirs[1].path().join(n)).ok())
        .collect();
    outcome(
        csvs == 4 && differing.is_empty(),
        format!(
            "{} files ({csvs} csv) compared, {} differ",
            names.len(),
            differing.len()
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("beta equals deletion oracle", beta_matches_oracle),
        ("marginal validity", marginal_validity),
        ("informative-feature recovery", informative_recovery),
        ("consistency index identities", index_identities),
        ("p-value super-uniformity", super_uniformity),
        ("beta stopping behaviour", stopping_behavior),
        ("prediction-set structure", set_structure),
        ("golden fixtures", golden_fixtures),
        ("bench determinism", bench_determinism),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.pass {
            failures += 1;
        }
        println!(
            "criterion {} [{}] {name}: {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
