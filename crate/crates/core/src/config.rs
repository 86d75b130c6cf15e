//! Run configuration: one TOML file describing taxonomy, generator, model,
//! optimizer, loss, merge thresholds, and dataset sizes, hashed for
//! checkpoint compatibility checks.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::merge::MergeConfig;
use crate::model::ModelConfig;
use crate::optim::OptimConfig;
use crate::synth::{validate_generator, GeneratorConfig};
use crate::taxonomy::{desk_taxonomy, Taxonomy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DataConfig {
    pub train_samples: usize,
    pub val_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Model-initialization seed (the generator carries its own).
    pub seed: u64,
    /// Taxonomy config path; the built-in desk taxonomy when absent.
    pub taxonomy: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub merge: MergeConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            taxonomy: None,
            generator: GeneratorConfig::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            loss: LossWeights::default(),
            merge: MergeConfig::default(),
            data: DataConfig {
                train_samples: 8,
                val_samples: 32,
            },
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<(RunConfig, Taxonomy)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let tax = cfg.resolve_taxonomy(base)?;
        cfg.validate(&tax)?;
        Ok((cfg, tax))
    }

    pub fn resolve_taxonomy(&self, base: &Path) -> Result<Taxonomy> {
        match &self.taxonomy {
            None => Ok(desk_taxonomy()),
            Some(p) => {
                let full = if p.is_absolute() {
                    p.clone()
                } else {
                    base.join(p)
                };
                Taxonomy::load(full)
            }
        }
    }

    pub fn validate(&self, tax: &Taxonomy) -> Result<()> {
        validate_generator(&self.generator, tax)?;
        self.optim.validate()?;
        self.loss.validate()?;
        let [h, w] = self.generator.canvas;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "generator canvas {h}x{w} must be divisible by 32 for the encoder"
            )));
        }
        if self.generator.max_instances > self.model.thing_queries {
            return Err(Error::Config(format!(
                "max_instances {} exceeds thing_queries {}",
                self.generator.max_instances, self.model.thing_queries
            )));
        }
        if self.model.stages < 1 {
            return Err(Error::Config("stages must be >= 1".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_canonical_toml()?)?;
        Ok(())
    }

    /// Canonical serialized form; also the hashing input.
    pub fn to_canonical_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config serialize: {e}")))
    }

    /// Configuration fingerprint stored in checkpoints.
    pub fn hash(&self) -> [u8; 32] {
        let text = self.to_canonical_toml().unwrap_or_default();
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        h.finalize().into()
    }
}
