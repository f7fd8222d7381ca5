use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fagg::training::{ModelKind, ModelSpec, TrainConfig};
use fagg::transforms::TransformSpec;
use fagg::{Error, Result};

/// One training run, read from a JSON file. Unknown keys are rejected so a
/// typo cannot silently change hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    #[serde(default = "default_mixtures")]
    pub mixtures: usize,
    #[serde(default)]
    pub transforms: Vec<TransformSpec>,
    #[serde(default)]
    pub null_expert: bool,
    pub train: TrainConfig,
    #[serde(default)]
    pub label_filter_keep: Option<usize>,
}

fn default_mixtures() -> usize {
    2
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("run config: {e}")))?;
        Ok(config)
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            model: self.model.clone(),
            mixtures: self.mixtures,
            transforms: self.transforms.clone(),
            null_expert: self.null_expert,
        }
    }

    /// Training config with the top-level label filter folded in.
    pub fn train_config(&self) -> TrainConfig {
        let mut train = self.train.clone();
        train.label_filter_keep = self.label_filter_keep;
        train
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    Empirical,
    Grid,
    Regress,
}

/// Fusion plan file: stage-1 groups (one per model, each a list of
/// prediction CSVs with optional intra-model weights) and the stage-2
/// combination. `truth` is required by the grid and regress strategies.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionPlan {
    pub stage1: Vec<Stage1Entry>,
    pub stage2: Stage2,
    pub strategy: FusionStrategy,
    #[serde(default)]
    pub truth: Option<PathBuf>,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_k")]
    pub k: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Entry {
    pub sets: Vec<PathBuf>,
    /// Omitted weights fall back to the shipped template for 3/4/5
    /// checkpoints, else uniform.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2 {
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

fn default_step() -> f64 {
    0.05
}

fn default_k() -> usize {
    20
}

impl FusionPlan {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())?;
        let plan: FusionPlan =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("fusion plan: {e}")))?;
        if plan.stage1.is_empty() {
            return Err(Error::config("fusion plan needs at least one stage1 group"));
        }
        for (i, entry) in plan.stage1.iter().enumerate() {
            if entry.sets.is_empty() {
                return Err(Error::config(format!("stage1 group {i} lists no sets")));
            }
            if let Some(w) = &entry.weights {
                if w.len() != entry.sets.len() {
                    return Err(Error::config(format!(
                        "stage1 group {i}: {} weights for {} sets",
                        w.len(),
                        entry.sets.len()
                    )));
                }
            }
        }
        Ok(plan)
    }
}
