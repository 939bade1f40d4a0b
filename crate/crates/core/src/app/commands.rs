use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;

use super::{prepare_data, LoadedConfig, PreparedData};
use crate::calibration::{generalized_quantile, AdaptedTask, CdfVariant, ConditionalCdf};
use crate::data::{
    csv_headers, read_csv_columns, standardize, Standardization, StandardizePolicy, TaskCollection,
    TaskDataset, TransformRecord,
};
use crate::error::{Error, Result};
use crate::losses::{total_error, EvalReport};
use crate::model::{Checkpoint, SharedParams};
use crate::numerics::Matrix;
use crate::trainer::{evaluate_episodes, evaluation_episodes, meta_train_from, TrainTrace};

/// Quantile levels written by `predict`: 0.05, 0.10, …, 0.95.
pub const PREDICT_LEVELS: [f64; 19] = {
    let mut out = [0.0; 19];
    let mut k = 0;
    while k < 19 {
        out[k] = (k + 1) as f64 / 20.0;
        k += 1;
    }
    out
};

/// CDF levels at which `reliability` reports empirical frequencies.
pub const RELIABILITY_LEVELS: [f64; 19] = PREDICT_LEVELS;

const VARIANTS: [CdfVariant; 3] = [
    CdfVariant::Uncalibrated,
    CdfVariant::Calibrated,
    CdfVariant::Empirical,
];

fn variant_name(v: CdfVariant) -> &'static str {
    match v {
        CdfVariant::Uncalibrated => "uncalibrated",
        CdfVariant::Calibrated => "calibrated",
        CdfVariant::Empirical => "empirical",
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn json_line(value: &serde_json::Value) -> String {
    let mut s = value.to_string();
    s.push('\n');
    s
}

fn checkpoint_for(params: SharedParams, transform: &TransformRecord) -> Checkpoint {
    match transform {
        TransformRecord::Global { transform } => Checkpoint::new(params, Some(transform.clone())),
        TransformRecord::PerTask { .. } => {
            let mut c = Checkpoint::new(params, None);
            c.per_task_standardization = true;
            c
        }
    }
}

/// Trace file: one record per epoch, then a summary record.
pub fn trace_jsonl(trace: &TrainTrace) -> String {
    let mut out = String::new();
    for e in &trace.epochs {
        out += &json_line(&json!(e));
    }
    out += &json_line(&json!({
        "best_epoch": trace.best_epoch,
        "best_validation_loss": trace.best_validation_loss,
    }));
    out
}

/// Meta-train and write `config.toml`, `checkpoint.json`, `trace.jsonl`
/// and `timing.jsonl` to the output directory.
pub fn cmd_train(loaded: &LoadedConfig) -> Result<(SharedParams, TrainTrace)> {
    let config = &loaded.config;
    let data = prepare_data(loaded)?;
    let params = SharedParams::init(data.dim, config.model.clone(), config.seed)?;
    let (params, trace) =
        meta_train_from(params, &data.train, &data.validation, &config.train, |e| {
            let train = e
                .train_loss
                .map_or_else(|| "-".to_string(), |l| format!("{l:.6}"));
            println!(
                "epoch {:>5}  train {train:>10}  validation {:.6}",
                e.epoch, e.validation_loss
            );
        })?;

    let out = loaded.output_dir();
    create_dir(&out)?;
    write_file(&out.join("config.toml"), &loaded.text)?;
    checkpoint_for(params.clone(), &data.transform).save(out.join("checkpoint.json"))?;
    write_file(&out.join("trace.jsonl"), &trace_jsonl(&trace))?;
    let timing: String = trace
        .epochs
        .iter()
        .map(|e| json_line(&json!({"epoch": e.epoch, "wall_time_s": e.wall_time_s})))
        .collect();
    write_file(&out.join("timing.jsonl"), &timing)?;
    log::info!("wrote checkpoint and trace to {}", out.display());
    Ok((params, trace))
}

fn load_checked(
    loaded: &LoadedConfig,
    checkpoint: Option<&Path>,
    data: &PreparedData,
) -> Result<Checkpoint> {
    let path = checkpoint.map_or_else(
        || loaded.output_dir().join("checkpoint.json"),
        Path::to_path_buf,
    );
    let ckpt = Checkpoint::load(&path)?;
    if ckpt.feature_dim != data.dim {
        return Err(Error::Shape(format!(
            "checkpoint {} expects {} features but the data has {}",
            path.display(),
            ckpt.feature_dim,
            data.dim
        )));
    }
    Ok(ckpt)
}

fn report_table(report: &EvalReport, variant: CdfVariant) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "variant: {}   rows: {}",
        variant_name(variant),
        report.per_task.len()
    );
    let _ = writeln!(s, "{:<6}{:>12}{:>12}", "metric", "mean", "se");
    for (name, mean, se) in [
        ("mse", report.mse, report.mse_se),
        ("ece", report.ece, report.ece_se),
        ("te", report.te, report.te_se),
    ] {
        let _ = writeln!(s, "{name:<6}{mean:>12.6}{se:>12.6}");
    }
    s
}

/// Evaluate a checkpoint on the meta-test tasks and write
/// `eval-<variant>.jsonl` and `eval-<variant>.txt`.
pub fn cmd_eval(
    loaded: &LoadedConfig,
    checkpoint: Option<&Path>,
    variant: Option<CdfVariant>,
) -> Result<EvalReport> {
    let config = &loaded.config;
    let variant = variant.unwrap_or(config.eval.variant);
    let data = prepare_data(loaded)?;
    let ckpt = load_checked(loaded, checkpoint, &data)?;
    let episodes = evaluation_episodes(&data.test, &config.eval_config())?;
    let report = evaluate_episodes(&ckpt.params, &episodes, &[variant])?.remove(0);

    let k = config.eval.episodes_per_task;
    let mut lines = String::new();
    for (i, row) in report.per_task.iter().enumerate() {
        lines += &json_line(&json!({
            "task_id": row.task_id,
            "episode": i % k,
            "mse": row.mse,
            "ece": row.ece,
            "te": total_error(row.mse, row.ece),
        }));
    }
    lines += &json_line(&json!({
        "variant": variant,
        "rows": report.per_task.len(),
        "mse": report.mse, "mse_se": report.mse_se,
        "ece": report.ece, "ece_se": report.ece_se,
        "te": report.te, "te_se": report.te_se,
    }));
    let out = loaded.output_dir();
    create_dir(&out)?;
    let name = variant_name(variant);
    write_file(&out.join(format!("eval-{name}.jsonl")), &lines)?;
    let table = report_table(&report, variant);
    write_file(&out.join(format!("eval-{name}.txt")), &table)?;
    print!("{table}");
    Ok(report)
}

/// Pooled `(level, empirical CDF)` pairs on support and query sets of the
/// meta-test episodes, for each CDF variant. Written to `reliability.csv`.
pub fn cmd_reliability(
    loaded: &LoadedConfig,
    checkpoint: Option<&Path>,
) -> Result<Vec<(String, String, f64, f64)>> {
    let data = prepare_data(loaded)?;
    let ckpt = load_checked(loaded, checkpoint, &data)?;
    let episodes = evaluation_episodes(&data.test, &loaded.config.eval_config())?;

    // CDF values per (variant, set).
    let mut values: Vec<[Vec<f64>; 2]> =
        vec![Default::default(), Default::default(), Default::default()];
    for e in &episodes {
        let ns = e.support.len();
        let mut rows = e.support.features().data().to_vec();
        rows.extend_from_slice(e.query.features().data());
        let all = Matrix::from_vec(ns + e.query.len(), data.dim, rows)?;
        let adapted = AdaptedTask::new(&ckpt.params, &e.support, &all)?;
        let targets: Vec<f64> = e
            .support
            .targets()
            .iter()
            .chain(e.query.targets())
            .copied()
            .collect();
        for (slot, &variant) in values.iter_mut().zip(&VARIANTS) {
            for (i, (c, &y)) in adapted
                .conditionals(variant)?
                .iter()
                .zip(&targets)
                .enumerate()
            {
                slot[usize::from(i >= ns)].push(c.cdf(y));
            }
        }
    }

    let mut rows = Vec::new();
    let mut csv = String::from("set,variant,level,empirical\n");
    for (set_idx, set) in ["support", "query"].iter().enumerate() {
        for (slot, &variant) in values.iter().zip(&VARIANTS) {
            let v = &slot[set_idx];
            for &p in &RELIABILITY_LEVELS {
                let freq = v.iter().filter(|&&h| h <= p).count() as f64 / v.len() as f64;
                let _ = writeln!(csv, "{set},{},{p},{freq}", variant_name(variant));
                rows.push((set.to_string(), variant_name(variant).to_string(), p, freq));
            }
        }
    }
    let out = loaded.output_dir();
    create_dir(&out)?;
    write_file(&out.join("reliability.csv"), &csv)?;
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct PredictArgs {
    pub checkpoint: PathBuf,
    pub support: PathBuf,
    pub query: PathBuf,
    pub target_column: String,
    /// Defaults to every support column except the target.
    pub feature_columns: Option<Vec<String>>,
    /// Standard output when absent.
    pub output: Option<PathBuf>,
    pub variant: CdfVariant,
}

/// One output row of `predict`, in the data's original units.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub mean: f64,
    pub variance: f64,
    pub quantiles: Vec<f64>,
}

/// Adapt to a support CSV and write mean, variance and quantiles for every
/// row of a query CSV.
pub fn cmd_predict(args: &PredictArgs) -> Result<Vec<PredictionRow>> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let features = match &args.feature_columns {
        Some(f) => f.clone(),
        None => csv_headers(&args.support)?
            .into_iter()
            .filter(|h| *h != args.target_column)
            .collect(),
    };
    if features.len() != ckpt.feature_dim {
        return Err(Error::Shape(format!(
            "checkpoint expects {} features but {} feature columns were given",
            ckpt.feature_dim,
            features.len()
        )));
    }
    let mut columns = features.clone();
    columns.push(args.target_column.clone());
    let support_rows = read_csv_columns(&args.support, &columns)?;
    let query_rows = read_csv_columns(&args.query, &features)?;
    let d = features.len();
    let support = TaskDataset::new(
        "support",
        Matrix::from_vec(
            support_rows.len(),
            d,
            support_rows.iter().flat_map(|r| r[..d].to_vec()).collect(),
        )?,
        support_rows.iter().map(|r| r[d]).collect(),
    )?;
    let query = Matrix::from_vec(query_rows.len(), d, query_rows.concat())?;

    let transform: Standardization = if ckpt.per_task_standardization {
        let (_, record) = standardize(
            &TaskCollection::new(vec![support.clone()])?,
            StandardizePolicy::PerTask,
        )?;
        record.for_task("support").expect("fitted above").clone()
    } else {
        ckpt.standardization
            .clone()
            .unwrap_or_else(|| Standardization::identity(d))
    };
    let adapted = AdaptedTask::new(
        &ckpt.params,
        &transform.apply(&support),
        &transform.apply_features(&query),
    )?;

    let mut out = String::from("mean,variance");
    for p in PREDICT_LEVELS {
        let _ = write!(out, ",q{p:.2}");
    }
    out.push('\n');
    let mut rows = Vec::with_capacity(query.rows());
    for c in adapted.conditionals(args.variant)? {
        let quantiles = PREDICT_LEVELS
            .iter()
            .map(|&p| generalized_quantile(&c, p).map(|q| transform.invert_target(q)))
            .collect::<Result<Vec<f64>>>()?;
        let row = PredictionRow {
            mean: transform.invert_target(c.posterior.mean),
            variance: transform.invert_variance(c.posterior.variance),
            quantiles,
        };
        let _ = write!(out, "{},{}", row.mean, row.variance);
        for q in &row.quantiles {
            let _ = write!(out, ",{q}");
        }
        out.push('\n');
        rows.push(row);
    }
    match &args.output {
        Some(path) => write_file(path, &out)?,
        None => std::io::stdout()
            .write_all(out.as_bytes())
            .map_err(|e| Error::io("<stdout>", e))?,
    }
    Ok(rows)
}
