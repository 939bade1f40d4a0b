//! Run configuration and the train / eval / predict / reliability commands.

mod commands;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use commands::{
    cmd_eval, cmd_predict, cmd_reliability, cmd_train, PredictArgs, PREDICT_LEVELS,
    RELIABILITY_LEVELS,
};

use crate::calibration::CdfVariant;
use crate::data::{
    gen_gp_tasks, gen_sine_tasks, load_csv_multitask, split_tasks, standardize, CsvSchema,
    GpTaskConfig, SineTaskConfig, Split, StandardizePolicy, TaskCollection, TaskDataset,
    TransformRecord,
};
use crate::error::{Error, Result};
use crate::model::ModelOptions;
use crate::trainer::{EvalConfig, TrainConfig};

/// Relative output directories resolve against this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "METACAL_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorConfig {
    Gp(GpTaskConfig),
    Sine(SineTaskConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    /// Relative paths resolve against the config file's directory.
    pub path: PathBuf,
    pub task_column: String,
    pub feature_columns: Vec<String>,
    pub target_column: String,
    /// Defaults to `support_size + query_size`.
    pub min_task_size: Option<usize>,
}

impl CsvSource {
    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            task_column: self.task_column.clone(),
            feature_columns: self.feature_columns.clone(),
            target_column: self.target_column.clone(),
        }
    }
}

fn default_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub generator: Option<GeneratorConfig>,
    pub csv: Option<CsvSource>,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub standardize: StandardizePolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Defaults to the training support size.
    pub support_size: Option<usize>,
    /// `None` scores every non-support instance.
    pub query_size: Option<usize>,
    pub episodes_per_task: usize,
    pub variant: CdfVariant,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            support_size: None,
            query_size: None,
            episodes_per_task: 1,
            variant: CdfVariant::Calibrated,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelOptions,
    #[serde(default)]
    pub eval: EvalSection,
}

/// A parsed config together with its source text and location.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub text: String,
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if config.train.seed != 0 {
            return Err(Error::Config(
                "set `seed` at the top level, not under [train]".into(),
            ));
        }
        config.train.seed = config.seed;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        match (&self.data.generator, &self.data.csv) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => {
                return Err(Error::Config(
                    "exactly one of [data.generator] and [data.csv] must be given".into(),
                ))
            }
        }
        self.train.validate()?;
        if self.eval.episodes_per_task == 0 {
            return Err(Error::Config(
                "eval.episodes_per_task must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            support_size: self.eval.support_size.unwrap_or(self.train.support_size),
            query_size: self.eval.query_size,
            episodes_per_task: self.eval.episodes_per_task,
            seed: self.seed,
        }
    }
}

impl LoadedConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config = RunConfig::from_toml(&text)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let loaded = Self {
            config,
            text,
            base_dir,
        };
        if let Some(csv) = &loaded.config.data.csv {
            let p = loaded.resolve(&csv.path);
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::from(std::io::ErrorKind::NotFound),
                ));
            }
        }
        Ok(loaded)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Output directory after applying the output-root override.
    pub fn output_dir(&self) -> PathBuf {
        let out = &self.config.output_dir;
        if out.is_absolute() {
            return out.clone();
        }
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(out),
            None => self.base_dir.join(out),
        }
    }
}

/// Standardized tasks by split.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Vec<TaskDataset>,
    pub validation: Vec<TaskDataset>,
    pub test: Vec<TaskDataset>,
    pub transform: TransformRecord,
    pub dim: usize,
}

fn raw_collection(loaded: &LoadedConfig) -> Result<TaskCollection> {
    let c = &loaded.config;
    match (&c.data.generator, &c.data.csv) {
        (Some(GeneratorConfig::Gp(g)), _) => gen_gp_tasks(g),
        (Some(GeneratorConfig::Sine(g)), _) => gen_sine_tasks(g),
        (None, Some(csv)) => {
            let min = csv
                .min_task_size
                .unwrap_or(c.train.support_size + c.train.query_size);
            Ok(load_csv_multitask(loaded.resolve(&csv.path), &csv.schema(), min)?.collection)
        }
        (None, None) => unreachable!("validated at load"),
    }
}

/// Generate or load the tasks, split them and standardize.
pub fn prepare_data(loaded: &LoadedConfig) -> Result<PreparedData> {
    let c = &loaded.config;
    let raw = raw_collection(loaded)?;
    let dim = raw
        .dim()
        .ok_or_else(|| Error::Config("the data source produced no tasks".into()))?;
    let split = split_tasks(&raw, c.data.split, c.seed)?;
    let (standardized, transform) = standardize(&split, c.data.standardize)?;
    Ok(PreparedData {
        train: standardized.split(Split::Train),
        validation: standardized.split(Split::Validation),
        test: standardized.split(Split::Test),
        transform,
        dim,
    })
}
