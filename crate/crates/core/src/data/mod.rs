//! Multi-task datasets: containers, task splits and standardization.

mod csv_io;
mod synthetic;

pub use csv_io::{
    csv_headers, load_csv_multitask, read_csv_columns, write_csv_multitask, CsvSchema, DroppedTask,
    LoadedCsv,
};
pub use synthetic::{
    gen_gp_tasks, gen_gp_tasks_with_latent, gen_sine_tasks, GpTaskConfig, NoiseShape,
    SineTaskConfig,
};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// One task's labeled instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task_id: String,
    features: Matrix,
    targets: Vec<f64>,
}

impl TaskDataset {
    pub fn new(task_id: impl Into<String>, features: Matrix, targets: Vec<f64>) -> Result<Self> {
        let task_id = task_id.into();
        if features.rows() == 0 {
            return Err(Error::Config(format!("task `{task_id}` has no instances")));
        }
        if features.rows() != targets.len() {
            return Err(Error::Shape(format!(
                "task `{task_id}`: {} feature rows but {} targets",
                features.rows(),
                targets.len()
            )));
        }
        if !features.is_finite() || targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::Domain(format!(
                "task `{task_id}` contains non-finite values"
            )));
        }
        Ok(Self {
            task_id,
            features,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Instances at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> TaskDataset {
        TaskDataset {
            task_id: self.task_id.clone(),
            features: self.features.select_rows(indices),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];
}

/// Tasks sharing one feature dimension, optionally tagged with a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskCollection {
    pub tasks: Vec<TaskDataset>,
    pub splits: Option<Vec<Split>>,
}

impl TaskCollection {
    pub fn new(tasks: Vec<TaskDataset>) -> Result<Self> {
        if let Some(first) = tasks.first() {
            let d = first.dim();
            if let Some(bad) = tasks.iter().find(|t| t.dim() != d) {
                return Err(Error::Shape(format!(
                    "task `{}` has {} features, expected {d}",
                    bad.task_id,
                    bad.dim()
                )));
            }
        }
        Ok(Self {
            tasks,
            splits: None,
        })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Feature dimension, `None` for an empty collection.
    pub fn dim(&self) -> Option<usize> {
        self.tasks.first().map(TaskDataset::dim)
    }

    /// Tasks assigned to `split`, cloned. Empty if no split was assigned.
    pub fn split(&self, split: Split) -> Vec<TaskDataset> {
        match &self.splits {
            None => Vec::new(),
            Some(tags) => self
                .tasks
                .iter()
                .zip(tags)
                .filter(|(_, s)| **s == split)
                .map(|(t, _)| t.clone())
                .collect(),
        }
    }

    pub fn total_instances(&self) -> usize {
        self.tasks.iter().map(TaskDataset::len).sum()
    }
}

/// Randomly assign every task to train/validation/test by the given fractions.
///
/// Split sizes are rounded to the nearest task count, the test split takes
/// the remainder, and every split with a positive fraction receives at least
/// one task.
pub fn split_tasks(
    collection: &TaskCollection,
    fractions: [f64; 3],
    seed: u64,
) -> Result<TaskCollection> {
    if fractions.iter().any(|f| *f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let n = collection.len();
    let wanted = fractions.iter().filter(|f| **f > 0.0).count();
    if n < wanted {
        return Err(Error::Config(format!(
            "cannot split {n} tasks into {wanted} non-empty splits"
        )));
    }
    let mut counts = [0usize; 3];
    counts[0] = (fractions[0] * n as f64).round() as usize;
    counts[1] = (fractions[1] * n as f64).round() as usize;
    counts[0] = counts[0].min(n);
    counts[1] = counts[1].min(n - counts[0]);
    counts[2] = n - counts[0] - counts[1];
    // Give every requested split at least one task, taking from the largest.
    for i in 0..3 {
        if fractions[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| counts[j]).expect("three splits");
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut tags = vec![Split::Train; n];
    for (rank, &task) in order.iter().enumerate() {
        tags[task] = if rank < counts[0] {
            Split::Train
        } else if rank < counts[0] + counts[1] {
            Split::Validation
        } else {
            Split::Test
        };
    }
    Ok(TaskCollection {
        tasks: collection.tasks.clone(),
        splits: Some(tags),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandardizePolicy {
    /// Statistics from the training split (or all tasks if unsplit), applied everywhere.
    #[default]
    Global,
    PerTask,
}

/// Affine map to zero mean and unit variance for features and target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub target_mean: f64,
    pub target_scale: f64,
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Self {
            feature_mean: vec![0.0; dim],
            feature_scale: vec![1.0; dim],
            target_mean: 0.0,
            target_scale: 1.0,
        }
    }

    fn fit<'a>(tasks: impl Iterator<Item = &'a TaskDataset> + Clone, dim: usize) -> Self {
        let mut feature_mean = Vec::with_capacity(dim);
        let mut feature_scale = Vec::with_capacity(dim);
        for c in 0..dim {
            let column = tasks
                .clone()
                .flat_map(|t| (0..t.len()).map(move |r| t.features.get(r, c)));
            let (mean, scale) = moments(column, &format!("feature column {c}"));
            feature_mean.push(mean);
            feature_scale.push(scale);
        }
        let (target_mean, target_scale) =
            moments(tasks.flat_map(|t| t.targets.iter().copied()), "target");
        Self {
            feature_mean,
            feature_scale,
            target_mean,
            target_scale,
        }
    }

    pub fn apply_features(&self, features: &Matrix) -> Matrix {
        let d = features.cols();
        let mut out = features.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % d;
            *v = (*v - self.feature_mean[c]) / self.feature_scale[c];
        }
        out
    }

    pub fn apply_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_scale
    }

    pub fn invert_features(&self, features: &Matrix) -> Matrix {
        let d = features.cols();
        let mut out = features.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % d;
            *v = *v * self.feature_scale[c] + self.feature_mean[c];
        }
        out
    }

    pub fn invert_target(&self, y: f64) -> f64 {
        y * self.target_scale + self.target_mean
    }

    pub fn invert_variance(&self, v: f64) -> f64 {
        v * self.target_scale * self.target_scale
    }

    pub fn apply(&self, task: &TaskDataset) -> TaskDataset {
        TaskDataset {
            task_id: task.task_id.clone(),
            features: self.apply_features(&task.features),
            targets: task.targets.iter().map(|&y| self.apply_target(y)).collect(),
        }
    }

    pub fn invert(&self, task: &TaskDataset) -> TaskDataset {
        TaskDataset {
            task_id: task.task_id.clone(),
            features: self.invert_features(&task.features),
            targets: task
                .targets
                .iter()
                .map(|&y| self.invert_target(y))
                .collect(),
        }
    }
}

/// Mean and population standard deviation; scale 1 for constant inputs.
fn moments(values: impl Iterator<Item = f64>, what: &str) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let scale = var.sqrt();
    if scale > 1e-12 * mean.abs().max(1.0) {
        (mean, scale)
    } else {
        warn!("{what} has zero variance; centering only");
        (mean, 1.0)
    }
}

/// How a collection was standardized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum TransformRecord {
    Global {
        transform: Standardization,
    },
    PerTask {
        transforms: Vec<(String, Standardization)>,
    },
}

impl TransformRecord {
    pub fn for_task(&self, task_id: &str) -> Option<&Standardization> {
        match self {
            TransformRecord::Global { transform } => Some(transform),
            TransformRecord::PerTask { transforms } => transforms
                .iter()
                .find(|(id, _)| id == task_id)
                .map(|(_, t)| t),
        }
    }

    /// Undo the transform on a standardized collection.
    pub fn invert(&self, collection: &TaskCollection) -> Result<TaskCollection> {
        let tasks = collection
            .tasks
            .iter()
            .map(|t| {
                self.for_task(&t.task_id)
                    .map(|s| s.invert(t))
                    .ok_or_else(|| {
                        Error::Config(format!("no transform recorded for task `{}`", t.task_id))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskCollection {
            tasks,
            splits: collection.splits.clone(),
        })
    }
}

/// Shift and scale features and targets to zero mean and unit variance.
pub fn standardize(
    collection: &TaskCollection,
    policy: StandardizePolicy,
) -> Result<(TaskCollection, TransformRecord)> {
    let dim = collection
        .dim()
        .ok_or_else(|| Error::Config("cannot standardize an empty collection".into()))?;
    let (tasks, record) = match policy {
        StandardizePolicy::Global => {
            let train: Vec<&TaskDataset> = match &collection.splits {
                Some(tags) => collection
                    .tasks
                    .iter()
                    .zip(tags)
                    .filter(|(_, s)| **s == Split::Train)
                    .map(|(t, _)| t)
                    .collect(),
                None => collection.tasks.iter().collect(),
            };
            let source = if train.is_empty() {
                collection.tasks.iter().collect()
            } else {
                train
            };
            let transform = Standardization::fit(source.iter().copied(), dim);
            let tasks = collection
                .tasks
                .iter()
                .map(|t| transform.apply(t))
                .collect();
            (tasks, TransformRecord::Global { transform })
        }
        StandardizePolicy::PerTask => {
            let mut transforms = Vec::with_capacity(collection.len());
            let mut tasks = Vec::with_capacity(collection.len());
            for t in &collection.tasks {
                let s = Standardization::fit(std::iter::once(t), dim);
                tasks.push(s.apply(t));
                transforms.push((t.task_id.clone(), s));
            }
            (tasks, TransformRecord::PerTask { transforms })
        }
    };
    Ok((
        TaskCollection {
            tasks,
            splits: collection.splits.clone(),
        },
        record,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(id: &str, xs: &[f64], ys: &[f64]) -> TaskDataset {
        TaskDataset::new(id, Matrix::column(xs.to_vec()), ys.to_vec()).unwrap()
    }

    fn ten_tasks() -> TaskCollection {
        TaskCollection::new(
            (0..10)
                .map(|i| task(&format!("t{i}"), &[i as f64, 1.0], &[0.0, i as f64]))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let split = split_tasks(&ten_tasks(), [0.6, 0.2, 0.2], 7).unwrap();
        assert_eq!(split.split(Split::Train).len(), 6);
        assert_eq!(split.split(Split::Validation).len(), 2);
        assert_eq!(split.split(Split::Test).len(), 2);
        let again = split_tasks(&ten_tasks(), [0.6, 0.2, 0.2], 7).unwrap();
        assert_eq!(split.splits, again.splits);
        let mut ids: Vec<String> = Split::ALL
            .iter()
            .flat_map(|s| split.split(*s))
            .map(|t| t.task_id)
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 10);
    }

    #[test]
    fn split_rejects_too_few_tasks() {
        let two = TaskCollection::new(vec![task("a", &[0.0], &[0.0]), task("b", &[0.0], &[0.0])])
            .unwrap();
        assert!(matches!(
            split_tasks(&two, [0.6, 0.2, 0.2], 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            split_tasks(&ten_tasks(), [0.5, 0.2, 0.2], 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn split_respects_fractions_within_rounding() {
        for n in 3..40 {
            let c = TaskCollection::new(
                (0..n)
                    .map(|i| task(&i.to_string(), &[0.0], &[0.0]))
                    .collect(),
            )
            .unwrap();
            let s = split_tasks(&c, [0.6, 0.2, 0.2], n as u64).unwrap();
            let train = s.split(Split::Train).len() as f64;
            let val = s.split(Split::Validation).len() as f64;
            let test = s.split(Split::Test).len() as f64;
            assert_eq!((train + val + test) as usize, n);
            assert!((train - 0.6 * n as f64).abs() <= 1.0 + 1e-9, "n = {n}");
            assert!((val - 0.2 * n as f64).abs() <= 1.0 + 1e-9, "n = {n}");
            assert!((test - 0.2 * n as f64).abs() <= 1.0 + 1e-9, "n = {n}");
        }
    }

    #[test]
    fn standardized_input_is_a_fixed_point() {
        let c = TaskCollection::new(vec![task("a", &[-1.0, 1.0], &[1.0, -1.0])]).unwrap();
        let (out, record) = standardize(&c, StandardizePolicy::Global).unwrap();
        let TransformRecord::Global { transform } = &record else {
            panic!()
        };
        assert!((transform.feature_mean[0]).abs() < 1e-12);
        assert!((transform.feature_scale[0] - 1.0).abs() < 1e-12);
        assert!((transform.target_scale - 1.0).abs() < 1e-12);
        assert_eq!(out, c);
    }

    #[test]
    fn constant_column_is_centered_only() {
        let c = TaskCollection::new(vec![task("a", &[3.0, 3.0, 3.0], &[1.0, 2.0, 3.0])]).unwrap();
        let (out, record) = standardize(&c, StandardizePolicy::Global).unwrap();
        let t = record.for_task("a").unwrap();
        assert_eq!(t.feature_scale[0], 1.0);
        assert!(out.tasks[0].features().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn inverse_round_trips_both_policies() {
        let c = ten_tasks();
        for policy in [StandardizePolicy::Global, StandardizePolicy::PerTask] {
            let (out, record) = standardize(&c, policy).unwrap();
            let back = record.invert(&out).unwrap();
            for (a, b) in back.tasks.iter().zip(&c.tasks) {
                for (x, y) in a.features().data().iter().zip(b.features().data()) {
                    assert!((x - y).abs() < 1e-12);
                }
                for (x, y) in a.targets().iter().zip(b.targets()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn global_statistics_come_from_training_split() {
        let split = split_tasks(&ten_tasks(), [0.6, 0.2, 0.2], 3).unwrap();
        let (out, _) = standardize(&split, StandardizePolicy::Global).unwrap();
        let train = out.split(Split::Train);
        let ys: Vec<f64> = train.iter().flat_map(|t| t.targets().to_vec()).collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn dataset_validation() {
        assert!(TaskDataset::new("x", Matrix::zeros(0, 1), vec![]).is_err());
        assert!(TaskDataset::new("x", Matrix::column(vec![f64::NAN]), vec![0.0]).is_err());
        assert!(TaskDataset::new("x", Matrix::column(vec![0.0]), vec![0.0, 1.0]).is_err());
        let mixed = TaskCollection::new(vec![
            task("a", &[0.0], &[0.0]),
            TaskDataset::new("b", Matrix::zeros(1, 2), vec![0.0]).unwrap(),
        ]);
        assert!(matches!(mixed, Err(Error::Shape(_))));
    }
}
