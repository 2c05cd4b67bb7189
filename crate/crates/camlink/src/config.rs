//! Run configuration: a plain-text TOML file with strict (unknown keys
//! rejected) sections, overridable from the command line with dotted
//! `key.path=value` assignments. Every command writes the resolved
//! configuration next to its outputs so a run can be reproduced from the
//! snapshot alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionerConfig;
use crate::error::{Error, Result};
use crate::model::train::TrainHyper;
use crate::model::{Family, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub count: usize,
    pub n: usize,
    pub k: usize,
    pub d: f64,
    /// Train/val/test fractions; must sum to 1.
    pub split: [f64; 3],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            count: 6000,
            n: 16,
            k: 3,
            d: 0.4,
            split: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Supervised,
    Vae,
    Diffusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub objective: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub mean_repulsive_lambda: f64,
    pub mean_repulsive_margin: f64,
    pub threshold: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let h = TrainHyper::default();
        TrainSection {
            objective: Objective::Supervised,
            epochs: h.epochs,
            batch_size: h.batch_size,
            lr: h.lr,
            beta1: h.beta1,
            beta2: h.beta2,
            weight_decay: h.weight_decay,
            mean_repulsive_lambda: h.mean_repulsive_lambda,
            mean_repulsive_margin: h.mean_repulsive_margin,
            threshold: h.threshold,
        }
    }
}

impl TrainSection {
    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            mean_repulsive_lambda: self.mean_repulsive_lambda,
            mean_repulsive_margin: self.mean_repulsive_margin,
            threshold: self.threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeSection {
    pub d_z: usize,
    pub encoder_layers: usize,
}

impl Default for VaeSection {
    fn default() -> Self {
        VaeSection {
            d_z: 8,
            encoder_layers: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FinalStepConfig {
    #[default]
    Threshold,
    Sample,
}

impl From<FinalStepConfig> for crate::diffusion::FinalStep {
    fn from(f: FinalStepConfig) -> Self {
        match f {
            FinalStepConfig::Threshold => crate::diffusion::FinalStep::Threshold,
            FinalStepConfig::Sample => crate::diffusion::FinalStep::Sample,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    /// Horizon T.
    pub horizon: usize,
    /// Cosine schedule offset s.
    pub offset: f64,
    pub final_step: FinalStepConfig,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        DiffusionSection {
            horizon: 200,
            offset: 0.008,
            final_step: FinalStepConfig::Threshold,
        }
    }
}

/// Serializable mirror of [`ModelConfig`] without the conditioner (which has
/// its own top-level section).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub family: Family,
    pub layers: Option<usize>,
    pub heads: usize,
    pub d_model: usize,
    pub d_k: Option<usize>,
    pub long_residuals: bool,
    pub laplacian_pe: bool,
    pub unnormalized_scores: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            family: m.family,
            layers: m.layers,
            heads: m.heads,
            d_model: m.d_model,
            d_k: m.d_k,
            long_residuals: m.long_residuals,
            laplacian_pe: m.laplacian_pe,
            unnormalized_scores: m.unnormalized_scores,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelSection,
    pub conditioner: ConditionerConfig,
    pub train: TrainSection,
    pub vae: VaeSection,
    pub diffusion: DiffusionSection,
}

impl RunConfig {
    /// Assembled model configuration (model section + conditioner section).
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            family: self.model.family,
            layers: self.model.layers,
            heads: self.model.heads,
            d_model: self.model.d_model,
            d_k: self.model.d_k,
            long_residuals: self.model.long_residuals,
            laplacian_pe: self.model.laplacian_pe,
            unnormalized_scores: self.model.unnormalized_scores,
            conditioner: self.conditioner.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.dataset.split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "dataset.split must sum to 1, got {:?}",
                self.dataset.split
            )));
        }
        if self.dataset.n < 1 || self.dataset.k < 1 || self.dataset.d <= 0.0 {
            return Err(Error::Config(
                "dataset requires n >= 1, k >= 1, d > 0".into(),
            ));
        }
        self.model_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.train.objective == Objective::Diffusion
            && self.model.family != Family::GraphTransformer
        {
            return Err(Error::Config(
                "diffusion training requires model.family = \"graph_transformer\"".into(),
            ));
        }
        if self.diffusion.horizon == 0 || self.diffusion.offset <= 0.0 {
            return Err(Error::Config(
                "diffusion requires horizon >= 1 and offset > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut value: toml::Value = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        for assignment in overrides {
            apply_override(&mut value, assignment)?;
        }
        let config: RunConfig = value
            .try_into()
            .map_err(|e| Error::Config(format!("config error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, overrides)
    }

    /// Resolved-config snapshot written next to command outputs.
    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Applies one `dotted.key=value` assignment onto a parsed TOML tree.
fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| {
        Error::Config(format!("override '{assignment}' must look like key.path=value"))
    })?;
    let parts: Vec<&str> = path.trim().split('.').collect();
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{path}'")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{path}' crosses a non-table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override '{path}' crosses a non-table")))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_toml_scalar(raw.trim()));
    Ok(())
}

/// Interprets an override value: bool, integer, float, array, then string.
fn parse_toml_scalar(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    if raw.starts_with('[') {
        if let Ok(v) = toml::from_str::<toml::Value>(&format!("x = {raw}")) {
            if let Some(inner) = v.get("x") {
                return inner.clone();
            }
        }
    }
    toml::Value::String(raw.trim_matches('"').to_string())
}
