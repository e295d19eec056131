use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use crfe_core::classifier::{train_ova_on, TrainConfig, TrainError};
use crfe_core::conformal::{write_prediction_sets, ConformalError, ConformalPredictor};
use crfe_core::crfe::{eliminate, BetaCriterion, Method, SelectionError, StoppingPolicy};
use crfe_core::data::{
    generate_synthetic, impute_knn, load_csv_with, meta_path, DataError, LoadOptions,
    SyntheticSpec, DEFAULT_IMPUTATION_NEIGHBORS,
};
use crfe_core::harness::{
    emit_outputs, prepare_split, run_bench, run_consistency, write_consistency_csv,
    ExperimentConfig, HarnessError,
};
use crfe_core::metrics::{point_metrics, set_metrics};
use ndarray::Axis;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;

#[derive(Parser)]
#[command(
    name = "crfe",
    version,
    about = "Conformal recursive feature elimination"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its `.meta.json` sidecar.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Name of the label column in the written CSV.
        #[arg(long, default_value = "class")]
        label: String,
    },
    /// Run one selector on one split of a CSV dataset.
    Select {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        label: String,
        #[arg(long, default_value = "crfe")]
        method: String,
        /// `fixed:<t>` or `beta`.
        #[arg(long, default_value = "beta")]
        stop: String,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        psi: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "")]
        missing_token: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Selector comparison, consistency and stopping benchmark.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Subset consistency across repeats.
    Consistency {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::InvalidConfig(_) => EXIT_CONFIG,
        TrainError::Io(_) | TrainError::Json(_) => EXIT_FAILURE,
        _ => EXIT_DATA,
    }
}

fn data_code(e: &DataError) -> u8 {
    match e {
        DataError::InvalidSpec(_) => EXIT_CONFIG,
        _ => EXIT_DATA,
    }
}

fn exit_code(e: &HarnessError) -> u8 {
    match e {
        HarnessError::Config(_) => EXIT_CONFIG,
        HarnessError::Data(d) => data_code(d),
        HarnessError::Train(t) => train_code(t),
        HarnessError::Selection(s) => match s {
            SelectionError::InvalidPolicy(_) => EXIT_CONFIG,
            SelectionError::Train(t) => train_code(t),
            SelectionError::Conformal(ConformalError::InvalidEpsilon(_)) => EXIT_CONFIG,
            SelectionError::Io(_) | SelectionError::Json(_) | SelectionError::Csv(_) => {
                EXIT_FAILURE
            }
            _ => EXIT_DATA,
        },
        HarnessError::Conformal(ConformalError::InvalidEpsilon(_)) => EXIT_CONFIG,
        HarnessError::Conformal(_) | HarnessError::Metrics(_) => EXIT_DATA,
        _ => EXIT_FAILURE,
    }
}

fn config_error(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(e.to_string())
}

fn synth(spec: &Path, out: &Path, label: &str) -> Result<(), HarnessError> {
    let text =
        fs::read_to_string(spec).map_err(|e| config_error(format!("{}: {e}", spec.display())))?;
    let spec: SyntheticSpec = serde_json::from_str(&text).map_err(config_error)?;
    let (data, meta) = generate_synthetic(&spec)?;
    data.write_csv(out, label)?;
    meta.write_json(meta_path(out))?;
    Ok(())
}

struct SelectArgs {
    data: PathBuf,
    label: String,
    method: String,
    stop: String,
    sigma: Option<f64>,
    psi: Option<usize>,
    warmup: Option<usize>,
    lambda: f64,
    epsilon: f64,
    seed: u64,
    missing_token: String,
    out: PathBuf,
}

fn select(a: SelectArgs) -> Result<(), HarnessError> {
    let method: Method = a.method.parse()?;
    let mut stop: StoppingPolicy = a.stop.parse()?;
    match &mut stop {
        StoppingPolicy::BetaCriterion(c) => {
            let d = BetaCriterion::default();
            *c = BetaCriterion {
                sigma: a.sigma.unwrap_or(d.sigma),
                psi: a.psi.unwrap_or(d.psi),
                warmup: a.warmup.unwrap_or(d.warmup),
                ..d
            };
        }
        StoppingPolicy::FixedSize { .. }
            if a.sigma.is_some() || a.psi.is_some() || a.warmup.is_some() =>
        {
            return Err(config_error("--sigma, --psi and --warmup need --stop beta"));
        }
        StoppingPolicy::FixedSize { .. } => {}
    }
    if !(a.epsilon > 0.0 && a.epsilon < 1.0) {
        return Err(config_error("epsilon must lie in (0, 1)"));
    }
    if !(0.0..=1.0).contains(&a.lambda) {
        return Err(config_error("lambda must lie in [0, 1]"));
    }

    let opts = LoadOptions {
        missing_token: a.missing_token,
        ..LoadOptions::new(a.label)
    };
    let data = load_csv_with(&a.data, &opts)?;
    let data = if data.has_missing() {
        impute_knn(&data, DEFAULT_IMPUTATION_NEIGHBORS)?
    } else {
        data
    };
    stop.validate(data.n_features())?;
    let parts = prepare_split(&data, a.seed)?;
    let cfg = TrainConfig::default().with_seed(a.seed);
    let trace = eliminate(
        method,
        &parts.train,
        &parts.calib,
        &cfg,
        a.lambda,
        &stop,
        &mut |_: &[usize], _: &crfe_core::LinearModelSet| -> Result<(), SelectionError> { Ok(()) },
    )?;

    let subset = trace.final_subset.clone();
    let train_x = parts.train.x.select(Axis(1), &subset);
    let models = train_ova_on(
        &train_x,
        &parts.train.y,
        data.n_classes(),
        &cfg,
        a.lambda,
        subset.clone(),
    )?;
    let calib_x = parts.calib.x.select(Axis(1), &subset);
    let test_x = parts.test.x.select(Axis(1), &subset);
    let predictor = ConformalPredictor::fit(models.clone(), &calib_x, &parts.calib.y)?;
    let sets = predictor.predict(&test_x, a.epsilon)?;
    let pred = test_x
        .rows()
        .into_iter()
        .map(|r| models.predict(r))
        .collect::<Result<Vec<_>, _>>()?;
    let m = data.n_classes();
    let report = serde_json::json!({
        "method": method,
        "seed": a.seed,
        "split_seed": parts.split_seed,
        "epsilon": a.epsilon,
        "selected": subset,
        "selected_names": subset.iter().map(|&j| &data.feature_names[j]).collect::<Vec<_>>(),
        "stop_reason": trace.stop_reason,
        "set_metrics": set_metrics(&sets, &parts.test.y, m)?,
        "point_metrics": point_metrics(&pred, &parts.test.y, m)?,
    });

    fs::create_dir_all(&a.out)?;
    fs::write(
        a.out.join("trace.json"),
        trace.to_json(&data.feature_names)? + "\n",
    )?;
    trace.write_csv(a.out.join("trace.csv"))?;
    models.write_json(a.out.join("models.json"))?;
    write_prediction_sets(
        a.out.join("prediction_sets.csv"),
        &parts.split.test_idx,
        &sets,
        &data.class_names,
    )?;
    fs::write(
        a.out.join("metrics.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Synth { spec, out, label } => synth(&spec, &out, &label),
        Command::Select {
            data,
            label,
            method,
            stop,
            sigma,
            psi,
            warmup,
            lambda,
            epsilon,
            seed,
            missing_token,
            out,
        } => select(SelectArgs {
            data,
            label,
            method,
            stop,
            sigma,
            psi,
            warmup,
            lambda,
            epsilon,
            seed,
            missing_token,
            out,
        }),
        Command::Bench { config, out } => {
            let cfg = ExperimentConfig::read_json(&config)?;
            emit_outputs(&run_bench(&cfg)?, &out)
        }
        Command::Consistency { config, out } => {
            let cfg = ExperimentConfig::read_json(&config)?;
            let (_, report) = run_consistency(&cfg)?;
            fs::create_dir_all(&out)?;
            write_consistency_csv(&report, out.join("consistency.csv"))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
