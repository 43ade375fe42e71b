//! Run configuration shared by `train` and `swa`.

use std::fs;
use std::path::{Path, PathBuf};

use fpi_core::nn::{Head, ModelConfig};
use fpi_core::testbench::TestbenchConfig;
use fpi_core::train::TrainConfig;
use fpi_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelPreset {
    /// Narrow stages for CPU-scale experiments.
    Desk,
    /// Full-width network.
    Full,
}

impl ModelPreset {
    pub fn build(self, input_size: usize, head: Head) -> ModelConfig {
        match self {
            ModelPreset::Desk => ModelConfig::desk(input_size, head),
            ModelPreset::Full => ModelConfig::full(input_size, head),
        }
    }
}

/// Everything a training run needs. All randomness derives from
/// `train.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub testbench: TestbenchConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        // Relative paths in a config file are relative to the file.
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.manifest, &mut cfg.out] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let want = Head::for_mode(self.train.alpha_mode);
        if self.model.head != want {
            return Err(Error::InvalidArgument(format!(
                "{} training needs the {} head, config has {}",
                self.train.alpha_mode,
                want.name(),
                self.model.head.name()
            )));
        }
        Ok(())
    }
}
