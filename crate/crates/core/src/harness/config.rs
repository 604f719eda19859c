use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::segnet::{ModelSpec, SceneSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Seed of the generated splits, independent of the run seed so runs with
    /// different seeds share data.
    pub seed: u64,
    pub train_images: usize,
    pub val_images: usize,
    pub scene: SceneSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train_images: 512,
            val_images: 128,
            scene: SceneSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Exponent of the poly schedule `lr = base_lr * (1 - t/T)^power`.
    pub poly_power: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
        }
    }
}

impl OptimizerConfig {
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        let frac = 1.0 - step as f64 / total.max(1) as f64;
        self.base_lr * frac.max(0.0).powf(self.poly_power)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    /// Evaluate and checkpoint every this many steps; 0 only at the end.
    pub eval_interval: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelSpec,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 8,
            eval_interval: 500,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            model: ModelSpec::default(),
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.model.validate()?;
        self.dataset.scene.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batch norm".into()));
        }
        if self.batch_size > self.dataset.train_images {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the {} training images",
                self.batch_size, self.dataset.train_images
            )));
        }
        if self.dataset.val_images == 0 {
            return Err(Error::Config("val_images must be positive".into()));
        }
        let scene = &self.dataset.scene;
        if scene.height % 32 != 0 || scene.width % 32 != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be divisible by 32",
                scene.height, scene.width
            )));
        }
        for w in &self.loss.scale_weights {
            if !crate::segnet::STRIDES.contains(&w.stride) {
                return Err(Error::Config(format!("the model has no stride {}", w.stride)));
            }
        }
        let o = &self.optimizer;
        if !(o.base_lr > 0.0) || !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) || !(o.poly_power >= 0.0)
        {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.dataset.scene.n_classes
    }

    /// Classes reported as the rare subgroup.
    pub fn rare_classes(&self) -> Vec<u32> {
        self.dataset.scene.rare_class.into_iter().collect()
    }
}
