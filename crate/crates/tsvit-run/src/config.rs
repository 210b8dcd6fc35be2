//! The JSON experiment configuration driving the CLI.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsvit_core::model::TsVitConfig;

use crate::error::{Result, RunError};
use crate::train::HParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: TsVitConfig,
    pub hparams: HParams,
    /// Path to the dataset manifest, relative to the config file.
    pub dataset: PathBuf,
    /// Output directory for run artifacts, relative to the config file.
    pub out_dir: PathBuf,
    /// Optional pretraining checkpoint to warm-start base weights from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    /// Keep the segmentation head trainable alongside the tuned method.
    #[serde(default = "default_true")]
    pub unfreeze_head: bool,
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| RunError::Invalid(e.to_string()))?;
        self.hparams.validate()?;
        Ok(())
    }

    /// Resolve a config-relative path against the config file's directory.
    pub fn resolve(&self, config_path: &Path, rel: &Path) -> PathBuf {
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            config_path
                .parent()
                .unwrap_or(Path::new("."))
                .join(rel)
        }
    }
}
