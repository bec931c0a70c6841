//! Run configuration: a TOML key-value file echoed into every run directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DomainSpec;
use crate::error::{Error, Result};
use crate::net::{NetworkConfig, TrainConfig};

/// Where the training set comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Existing dataset directory. When absent, a source domain is generated.
    pub dataset: Option<PathBuf>,
    /// Generated-domain description; defaults to the source preset.
    pub spec: Option<DomainSpec>,
    pub image_size: usize,
    pub train_samples: usize,
    pub layout_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            spec: None,
            image_size: 32,
            train_samples: 200,
            layout_seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; copied into the network and training seeds.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn resolve_seeds(&mut self) {
        self.network.seed = self.seed;
        self.train.seed = self.seed.wrapping_add(1);
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        if let Some(spec) = &self.data.spec {
            spec.validate()?;
            if spec.num_categories != self.network.num_classes {
                return Err(Error::Config(format!(
                    "domain has {} categories but the network predicts {}",
                    spec.num_categories, self.network.num_classes
                )));
            }
        }
        if self.data.dataset.is_none() && self.data.train_samples == 0 {
            return Err(Error::Config("train_samples must be positive".into()));
        }
        Ok(())
    }

    /// Domain used when no dataset directory is configured.
    pub fn source_spec(&self) -> DomainSpec {
        self.data.spec.clone().unwrap_or_else(|| {
            DomainSpec::source(self.network.num_classes, self.data.image_size, self.data.layout_seed)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig {
            seed: 9,
            ..Default::default()
        };
        cfg.train.max_steps = 17;
        cfg.train.mla.local = false;
        cfg.resolve_seeds();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = RunConfig::from_toml("seed = 3\n[train]\nmax_steps = 5\n").unwrap();
        assert_eq!(cfg.train.max_steps, 5);
        assert_eq!(cfg.train.lambda_pc, 10.0);
        assert_eq!(cfg.network.seed, 3);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nlr_encoder = -1.0\n").is_err());
        assert!(RunConfig::from_toml("not toml at all = = =").is_err());
        assert!(RunConfig::from_toml("[network]\nnum_classes = 3\n[data.spec]\nname='x'\nnum_categories=4\nimage_size=16\nlayout_seed=0\ncells=3\ntexture_amplitude=0.3\nstyles=[]\n").is_err());
    }
}
