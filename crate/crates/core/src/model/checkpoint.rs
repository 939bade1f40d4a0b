use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::SharedParams;
use crate::data::Standardization;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// On-disk record of a trained model (JSON).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub feature_dim: usize,
    pub encoder_shapes: Vec<(usize, usize)>,
    pub mean_shapes: Vec<(usize, usize)>,
    pub params: SharedParams,
    /// Maps raw data to the model's standardized units, when training used one.
    pub standardization: Option<Standardization>,
    /// Training standardized every task by its own statistics, so new tasks
    /// must be standardized by their support set.
    #[serde(default)]
    pub per_task_standardization: bool,
}

impl Checkpoint {
    pub fn new(params: SharedParams, standardization: Option<Standardization>) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            feature_dim: params.dim,
            encoder_shapes: params
                .encoder
                .as_ref()
                .map(|e| e.shapes())
                .unwrap_or_default(),
            mean_shapes: params.mean.shapes(),
            params,
            standardization,
            per_task_standardization: false,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn validate(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let p = &self.params;
        let encoder_shapes = p.encoder.as_ref().map(|e| e.shapes()).unwrap_or_default();
        if p.dim != self.feature_dim
            || encoder_shapes != self.encoder_shapes
            || p.mean.shapes() != self.mean_shapes
        {
            return Err(Error::Checkpoint(
                "layer shapes disagree with the recorded header".into(),
            ));
        }
        if p.mean.input_dim() != p.dim || p.encoder.as_ref().is_some_and(|e| e.input_dim() != p.dim)
        {
            return Err(Error::Checkpoint(
                "network input width differs from feature dimension".into(),
            ));
        }
        if !p.is_finite() {
            return Err(Error::Checkpoint(
                "checkpoint contains non-finite parameters".into(),
            ));
        }
        Ok(())
    }
}
