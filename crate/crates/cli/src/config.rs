//! The JSON run configuration shared by every subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use vecgauge::decode::DecodeConfig;
use vecgauge::eval::EvalConfig;
use vecgauge::metrics::MetricConfig;
use vecgauge::model::ModelConfig;
use vecgauge::synth::SynthRanges;
use vecgauge::train::TrainConfig;
use vecgauge::ExecMode;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
    /// Every image, ignoring any split file.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synth: SynthRanges,
    pub split_ratios: [f64; 3],
    /// Fraction of the test split drawn from hard images when available.
    pub hard_quota: Option<f64>,
    pub train_split: SplitName,
    pub eval_split: SplitName,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: SynthRanges::default(),
            split_ratios: [7.0, 2.0, 1.0],
            hard_quota: Some(0.4),
            train_split: SplitName::Train,
            eval_split: SplitName::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Side unit of the tip/tail masks, in patch pixels.
    pub mask_sigma: f64,
    /// Patches per inference forward pass.
    pub batch_size: usize,
    pub exec: ExecMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mask_sigma: 3.0,
            batch_size: 16,
            exec: ExecMode::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub metrics: MetricConfig,
    pub data: DataConfig,
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                Self::from_json(&text)
            }
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: &dyn std::fmt::Display| CliError::Usage(format!("config: {e}"));
        self.model.validate().map_err(|e| usage(&e))?;
        self.train.validate().map_err(|e| usage(&e))?;
        self.decode.validate().map_err(|e| usage(&e))?;
        self.metrics.validate().map_err(|e| usage(&e))?;
        self.data.synth.validate().map_err(|e| usage(&e))?;
        if self.pipeline.batch_size == 0 || !(self.pipeline.mask_sigma > 0.0) {
            return Err(CliError::Usage("config: pipeline batch_size and mask_sigma must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the fully resolved config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            decode: self.decode,
            metrics: self.metrics.clone(),
            mask_sigma: self.pipeline.mask_sigma,
            batch_size: self.pipeline.batch_size,
            exec: self.pipeline.exec,
        }
    }
}
