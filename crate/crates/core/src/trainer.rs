//! Episodic meta-training with Adam and meta-validation early stopping.

use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::CdfVariant;
use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::losses::{
    episode_loss, episode_loss_on_tape, evaluate_task, EvalReport, TaskMetrics, DEFAULT_LAMBDA,
};
use crate::model::{Episode, ModelOptions, ParamVars, SharedParams};
use crate::numerics::Tape;

// Independent random streams derived from the run seed.
const TRAIN_STREAM: u64 = 1;
const VALIDATION_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub support_size: usize,
    pub query_size: usize,
    pub batch_tasks: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub lambda: f64,
    /// Frozen validation episodes drawn per validation task.
    pub validation_episodes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            support_size: 10,
            query_size: 30,
            batch_tasks: 32,
            learning_rate: 1e-2,
            max_epochs: 1000,
            early_stop_patience: 50,
            lambda: DEFAULT_LAMBDA,
            validation_episodes: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.support_size == 0 || self.query_size == 0 {
            return fail("support_size and query_size must be at least 1");
        }
        if self.batch_tasks == 0 {
            return fail("batch_tasks must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be a non-negative finite number");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail("lambda must lie in [0, 1]");
        }
        if self.validation_episodes == 0 {
            return fail("validation_episodes must be at least 1");
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter length changed");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Disjoint support and query sets drawn uniformly without replacement.
pub fn sample_episode(
    dataset: &TaskDataset,
    support_size: usize,
    query_size: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    let needed = support_size + query_size;
    if support_size == 0 || query_size == 0 || dataset.len() < needed {
        return Err(Error::Sampling {
            task: dataset.task_id.clone(),
            reason: format!(
                "{} instances cannot supply {support_size} support + {query_size} query",
                dataset.len()
            ),
        });
    }
    let picked = index::sample(rng, dataset.len(), needed).into_vec();
    Ok(Episode {
        support: dataset.subset(&picked[..support_size]),
        query: dataset.subset(&picked[support_size..]),
    })
}

/// Mean loss over `episodes` and its gradient in flat parameter order.
pub fn batch_gradient(
    params: &SharedParams,
    episodes: &[Episode],
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    if episodes.is_empty() {
        return Err(Error::Config("a batch needs at least one episode".into()));
    }
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for (i, episode) in episodes.iter().enumerate() {
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, params);
        let l = episode_loss_on_tape(&mut tape, &vars, params, episode, lambda)?;
        let value = tape.value(l.total).item();
        let g = vars.flat_gradient(&tape.backward(l.total));
        if !value.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                episode: format!("batch position {i}, task `{}`", episode.support.task_id),
            });
        }
        loss += value;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let n = episodes.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// One Adam update on the batch-averaged loss. Returns the batch loss.
pub fn train_step(
    params: &mut SharedParams,
    adam: &mut Adam,
    episodes: &[Episode],
    lambda: f64,
) -> Result<f64> {
    let (loss, grad) = batch_gradient(params, episodes, lambda)?;
    let mut flat = params.to_vec();
    adam.step(&mut flat, &grad);
    params.set_from_slice(&flat)?;
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss; absent for the pre-training evaluation at epoch 0.
    pub train_loss: Option<f64>,
    pub validation_loss: f64,
    /// Seconds since training started. Not serialized, so traces of
    /// identical runs are byte-identical.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
}

/// Frozen validation episodes: `per_task` draws from every task.
pub fn validation_episodes(tasks: &[TaskDataset], config: &TrainConfig) -> Result<Vec<Episode>> {
    let mut rng = stream_rng(config.seed, VALIDATION_STREAM);
    let mut out = Vec::with_capacity(tasks.len() * config.validation_episodes);
    for task in tasks {
        for _ in 0..config.validation_episodes {
            out.push(sample_episode(
                task,
                config.support_size,
                config.query_size,
                &mut rng,
            )?);
        }
    }
    Ok(out)
}

/// Mean total loss over `episodes`.
pub fn validation_loss(params: &SharedParams, episodes: &[Episode], lambda: f64) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::Config("no validation episodes".into()));
    }
    let mut total = 0.0;
    for e in episodes {
        total += episode_loss(params, e, lambda)?;
    }
    Ok(total / episodes.len() as f64)
}

fn check_tasks(tasks: &[TaskDataset], config: &TrainConfig, what: &str) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::Config(format!("{what} split has no tasks")));
    }
    let needed = config.support_size + config.query_size;
    if let Some(t) = tasks.iter().find(|t| t.len() < needed) {
        return Err(Error::Sampling {
            task: t.task_id.clone(),
            reason: format!("{} instances, episodes need {needed}", t.len()),
        });
    }
    Ok(())
}

/// Meta-train freshly initialised parameters.
pub fn meta_train(
    train: &[TaskDataset],
    validation: &[TaskDataset],
    options: ModelOptions,
    config: &TrainConfig,
) -> Result<(SharedParams, TrainTrace)> {
    let dim = train
        .first()
        .map(TaskDataset::dim)
        .ok_or_else(|| Error::Config("train split has no tasks".into()))?;
    let params = SharedParams::init(dim, options, config.seed)?;
    meta_train_from(params, train, validation, config, |_| {})
}

/// Meta-train from `params`, calling `on_epoch` after every validation pass.
///
/// Each epoch runs `⌈T / batch_tasks⌉` batches whose tasks are drawn
/// uniformly with replacement. The returned parameters are those of the
/// epoch with the lowest validation loss (epoch 0 is the starting point).
pub fn meta_train_from(
    mut params: SharedParams,
    train: &[TaskDataset],
    validation: &[TaskDataset],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(SharedParams, TrainTrace)> {
    config.validate()?;
    check_tasks(train, config, "train")?;
    check_tasks(validation, config, "validation")?;
    let start = Instant::now();
    let val_episodes = validation_episodes(validation, config)?;
    let mut rng = stream_rng(config.seed, TRAIN_STREAM);
    let mut adam = Adam::new(params.len(), config.learning_rate);
    let batches = train.len().div_ceil(config.batch_tasks);

    let first = EpochRecord {
        epoch: 0,
        train_loss: None,
        validation_loss: validation_loss(&params, &val_episodes, config.lambda)?,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    on_epoch(&first);
    let mut best = (0, first.validation_loss, params.clone());
    let mut epochs = vec![first];

    for epoch in 1..=config.max_epochs {
        let mut train_loss = 0.0;
        for _ in 0..batches {
            let mut batch = Vec::with_capacity(config.batch_tasks);
            for _ in 0..config.batch_tasks {
                let task = &train[rng.random_range(0..train.len())];
                batch.push(sample_episode(
                    task,
                    config.support_size,
                    config.query_size,
                    &mut rng,
                )?);
            }
            train_loss +=
                train_step(&mut params, &mut adam, &batch, config.lambda).map_err(|e| match e {
                    Error::NonFinite { episode } => Error::NonFinite {
                        episode: format!("epoch {epoch}, {episode}"),
                    },
                    other => other,
                })?;
        }
        let record = EpochRecord {
            epoch,
            train_loss: Some(train_loss / batches as f64),
            validation_loss: validation_loss(&params, &val_episodes, config.lambda)?,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        if record.validation_loss < best.1 {
            best = (epoch, record.validation_loss, params.clone());
        }
        epochs.push(record);
        if epoch - best.0 >= config.early_stop_patience {
            log::info!("early stop at epoch {epoch}; best epoch {}", best.0);
            break;
        }
    }
    let (best_epoch, best_validation_loss, best_params) = best;
    Ok((
        best_params,
        TrainTrace {
            epochs,
            best_epoch,
            best_validation_loss,
        },
    ))
}

/// How test tasks are split into support and query sets for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub support_size: usize,
    /// `None` uses every non-support instance as a query.
    pub query_size: Option<usize>,
    pub episodes_per_task: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            support_size: 10,
            query_size: None,
            episodes_per_task: 1,
            seed: 0,
        }
    }
}

/// Evaluation episodes for every task, in task order.
pub fn evaluation_episodes(tasks: &[TaskDataset], config: &EvalConfig) -> Result<Vec<Episode>> {
    if config.episodes_per_task == 0 {
        return Err(Error::Config("episodes_per_task must be at least 1".into()));
    }
    let mut rng = stream_rng(config.seed, EVAL_STREAM);
    let mut out = Vec::new();
    for task in tasks {
        let query = match config.query_size {
            Some(q) => q,
            None => task.len().saturating_sub(config.support_size),
        };
        for _ in 0..config.episodes_per_task {
            out.push(sample_episode(task, config.support_size, query, &mut rng)?);
        }
    }
    Ok(out)
}

/// One report per variant, all scored on the same episodes.
pub fn evaluate_episodes(
    params: &SharedParams,
    episodes: &[Episode],
    variants: &[CdfVariant],
) -> Result<Vec<EvalReport>> {
    variants
        .iter()
        .map(|&variant| {
            let rows = episodes
                .iter()
                .map(|e| evaluate_task(params, &e.support, &e.query, variant))
                .collect::<Result<Vec<TaskMetrics>>>()?;
            EvalReport::from_tasks(rows)
        })
        .collect()
}
