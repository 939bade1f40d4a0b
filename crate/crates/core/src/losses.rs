//! Training losses and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::calibration::{
    adapt_on_tape, calibrated_cdf_on_tape, generalized_quantile, AdaptedTask, CdfModel, CdfVariant,
    ConditionalCdf,
};
use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::model::{Episode, ParamVars, SharedParams};
use crate::numerics::{Matrix, Tape, Var};

/// Quantile levels at which ECE compares nominal and empirical coverage.
pub const ECE_LEVELS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Mean squared error.
pub fn regression_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Domain(
            "regression loss needs at least one prediction".into(),
        ));
    }
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let sse: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(f, y)| (f - y) * (f - y))
        .sum();
    Ok(sse / predictions.len() as f64)
}

fn check_levels(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Domain(
            "calibration loss needs at least one CDF value".into(),
        ));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("CDF value {v} outside [0, 1]")));
    }
    Ok(())
}

fn sort_permutation(values: &[f64]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..values.len()).collect();
    perm.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    perm
}

/// Mean absolute gap between the sorted CDF values and the grid `n/N`.
pub fn calibration_loss(values: &[f64]) -> Result<f64> {
    check_levels(values)?;
    let n = values.len() as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let total: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, p)| (p - (i + 1) as f64 / n).abs())
        .sum();
    Ok(total / n)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    Ok(())
}

/// `λ·reg + (1 − λ)·cal`.
pub fn total_loss(reg: f64, cal: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(lambda * reg + (1.0 - lambda) * cal)
}

pub fn regression_loss_on_tape(tape: &mut Tape, predictions: Var, targets: Var) -> Var {
    let diff = tape.sub(predictions, targets);
    let sq = tape.square(diff);
    tape.mean(sq)
}

/// Calibration loss with the sort permutation taken from the forward values
/// and held fixed for backpropagation.
pub fn calibration_loss_on_tape(tape: &mut Tape, values: Var) -> Var {
    let perm = sort_permutation(tape.value(values).data());
    let n = perm.len() as f64;
    let grid = Matrix::column((1..=perm.len()).map(|i| i as f64 / n).collect());
    let sorted = tape.gather(values, perm);
    let grid = tape.leaf(grid);
    let gap = tape.sub(sorted, grid);
    let gap = tape.abs(gap);
    tape.mean(gap)
}

pub fn total_loss_on_tape(tape: &mut Tape, reg: Var, cal: Var, lambda: f64) -> Var {
    let reg = tape.scale(reg, lambda);
    let cal = tape.scale(cal, 1.0 - lambda);
    tape.add(reg, cal)
}

/// Loss nodes for one episode.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeLoss {
    pub regression: Var,
    pub calibration: Var,
    pub total: Var,
}

/// Adapt to the support set and score the query set.
pub fn episode_loss_on_tape(
    tape: &mut Tape,
    vars: &ParamVars,
    params: &SharedParams,
    episode: &Episode,
    lambda: f64,
) -> Result<EpisodeLoss> {
    check_lambda(lambda)?;
    if episode.query.is_empty() {
        return Err(Error::Domain("query set is empty".into()));
    }
    let adapted = adapt_on_tape(
        tape,
        vars,
        params,
        &episode.support,
        episode.query.features(),
    )?;
    let y = tape.leaf(Matrix::column(episode.query.targets().to_vec()));
    let regression = regression_loss_on_tape(tape, adapted.posterior.mean, y);
    let h = calibrated_cdf_on_tape(tape, &adapted, y);
    let calibration = calibration_loss_on_tape(tape, h);
    let total = total_loss_on_tape(tape, regression, calibration, lambda);
    Ok(EpisodeLoss {
        regression,
        calibration,
        total,
    })
}

/// Value of the episode loss without keeping the tape.
pub fn episode_loss(params: &SharedParams, episode: &Episode, lambda: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let loss = episode_loss_on_tape(&mut tape, &vars, params, episode, lambda)?;
    Ok(tape.value(loss.total).item())
}

/// ECE over already-adapted conditionals, one per target.
pub fn ece_from_conditionals<C: ConditionalCdf>(
    conditionals: &[C],
    targets: &[f64],
) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::Domain(
            "ECE needs at least one query instance".into(),
        ));
    }
    if conditionals.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} conditionals for {} targets",
            conditionals.len(),
            targets.len()
        )));
    }
    let n = targets.len() as f64;
    let mut covered = [0usize; ECE_LEVELS.len()];
    for (c, &y) in conditionals.iter().zip(targets) {
        for (k, &p) in ECE_LEVELS.iter().enumerate() {
            if y <= generalized_quantile(c, p)? {
                covered[k] += 1;
            }
        }
    }
    let total: f64 = ECE_LEVELS
        .iter()
        .zip(covered)
        .map(|(p, c)| (p - c as f64 / n).abs())
        .sum();
    Ok(total / ECE_LEVELS.len() as f64)
}

/// `(1/|P|)·Σ_p |p − p̂(p)|` with `p̂(p)` the fraction of queries at or below
/// the model's `p`-quantile. A level the CDF never reaches has quantile `+∞`;
/// one it exceeds everywhere has quantile `−∞`.
pub fn ece<M: CdfModel>(model: &M, query: &TaskDataset) -> Result<f64> {
    let conditionals = (0..query.len())
        .map(|i| model.conditional(query.features().row(i)))
        .collect::<Result<Vec<_>>>()?;
    ece_from_conditionals(&conditionals, query.targets())
}

pub fn total_error(mse: f64, ece: f64) -> f64 {
    (mse + ece) / 2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task_id: String,
    pub mse: f64,
    pub ece: f64,
}

/// MSE of the posterior means and ECE of the chosen CDF on `query`.
pub fn evaluate_task(
    params: &SharedParams,
    support: &TaskDataset,
    query: &TaskDataset,
    variant: CdfVariant,
) -> Result<TaskMetrics> {
    let adapted = AdaptedTask::new(params, support, query.features())?;
    let means: Vec<f64> = adapted.predictions.iter().map(|p| p.mean).collect();
    let mse = regression_loss(&means, query.targets())?;
    let ece = ece_from_conditionals(&adapted.conditionals(variant)?, query.targets())?;
    Ok(TaskMetrics {
        task_id: query.task_id.clone(),
        mse,
        ece,
    })
}

/// Metrics averaged over evaluation rows (one row per task and episode),
/// with standard errors of those means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse: f64,
    pub ece: f64,
    pub te: f64,
    pub mse_se: f64,
    pub ece_se: f64,
    pub te_se: f64,
    pub per_task: Vec<TaskMetrics>,
}

fn mean_and_se(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl EvalReport {
    pub fn from_tasks(per_task: Vec<TaskMetrics>) -> Result<Self> {
        if per_task.is_empty() {
            return Err(Error::Domain(
                "evaluation report needs at least one task".into(),
            ));
        }
        let (mse, mse_se) = mean_and_se(per_task.iter().map(|t| t.mse));
        let (ece, ece_se) = mean_and_se(per_task.iter().map(|t| t.ece));
        let (_, te_se) = mean_and_se(per_task.iter().map(|t| total_error(t.mse, t.ece)));
        Ok(Self {
            mse,
            ece,
            te: total_error(mse, ece),
            mse_se,
            ece_se,
            te_se,
            per_task,
        })
    }
}
