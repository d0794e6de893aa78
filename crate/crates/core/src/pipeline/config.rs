//! Run configuration: flat key-value config files. Defaults carry the
//! full-scale training hyperparameters.

use crate::appearance::AppearanceConfig;
use crate::backends::BackendConfig;
use crate::composition::CompositionConfig;
use crate::dataset::DatasetLayout;
use crate::error::{Error, Result};
use crate::segmenter::SegmenterConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub category: String,
    pub dataset_root: PathBuf,
    pub workdir: PathBuf,
    pub layout: DatasetLayout,
    /// Number of part clusters K (composition maps have K+1 classes).
    pub k: usize,
    pub seed: u64,
    pub grid_n: usize,
    pub max_cluster_samples: usize,
    /// Train fraction carved off as validation when the dataset has none.
    pub validation_fraction: f64,
    pub backend: BackendConfig,
    pub segmenter: SegmenterConfig,
    pub composition: CompositionConfig,
    pub appearance: AppearanceConfig,
    pub fpr_limit: f64,
    /// Branches excluded from fusion at evaluation (ablation hook).
    pub disabled_branches: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            category: "category".into(),
            dataset_root: PathBuf::from("."),
            workdir: default_workdir(),
            layout: DatasetLayout::Loco,
            k: 6,
            seed: 0,
            grid_n: 32,
            max_cluster_samples: crate::compgen::DEFAULT_MAX_CLUSTER_SAMPLES,
            validation_fraction: 0.10,
            backend: BackendConfig::default(),
            segmenter: SegmenterConfig::default(),
            composition: CompositionConfig::default(),
            appearance: AppearanceConfig::default(),
            fpr_limit: crate::scoring::DEFAULT_FPR_LIMIT,
            disabled_branches: Vec::new(),
        }
    }
}

fn default_workdir() -> PathBuf {
    std::env::var_os("SALAD_WORKDIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("salad_work"))
}

impl RunConfig {
    /// Parse a flat `key = value` config file. Unknown keys are errors.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected `key = value`", path.display(), lineno + 1))
            })?;
            config
                .set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        }
        Ok(config)
    }

    /// Apply one key/value pair (also used for CLI overrides).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))
        }
        match key {
            "category" => self.category = value.to_string(),
            "dataset_root" => self.dataset_root = PathBuf::from(value),
            "workdir" => self.workdir = PathBuf::from(value),
            "layout" => {
                self.layout = match value {
                    "loco" => DatasetLayout::Loco,
                    "flat" => DatasetLayout::Flat,
                    other => return Err(Error::Config(format!("unknown layout `{other}`"))),
                }
            }
            "k" => self.k = parse(key, value)?,
            "seed" => {
                self.seed = parse(key, value)?;
                self.backend.seed = self.seed;
                self.segmenter.seed = self.seed;
                self.composition.seed = self.seed;
                self.appearance.seed = self.seed;
            }
            "grid_n" => self.grid_n = parse(key, value)?,
            "max_cluster_samples" => self.max_cluster_samples = parse(key, value)?,
            "validation_fraction" => self.validation_fraction = parse(key, value)?,
            "fpr_limit" => self.fpr_limit = parse(key, value)?,
            "disable_branches" => {
                self.disabled_branches = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            "feature_backend" => self.backend.feature_backend.id = value.to_string(),
            "mask_backend" => self.backend.mask_backend.id = value.to_string(),
            "feature_backend.weights" => {
                self.backend
                    .feature_backend
                    .params
                    .insert("weights".into(), value.to_string());
            }
            "mask_backend.weights" => {
                self.backend
                    .mask_backend
                    .params
                    .insert("weights".into(), value.to_string());
            }
            "segmenter.epochs" => self.segmenter.epochs = parse(key, value)?,
            "segmenter.lr" => self.segmenter.learning_rate = parse(key, value)?,
            "segmenter.batch_size" => self.segmenter.batch_size = parse(key, value)?,
            "segmenter.weight_decay" => self.segmenter.weight_decay = parse(key, value)?,
            "segmenter.base_width" => self.segmenter.base_width = parse(key, value)?,
            "segmenter.downsample" => self.segmenter.downsample = parse(key, value)?,
            "composition.iterations" => self.composition.iterations = parse(key, value)?,
            "composition.lr" => self.composition.learning_rate = parse(key, value)?,
            "composition.batch_size" => self.composition.batch_size = parse(key, value)?,
            "composition.alpha" => self.composition.alpha = parse(key, value)?,
            "composition.base_width" => self.composition.base_width = parse(key, value)?,
            "composition.downsample" => self.composition.downsample = parse(key, value)?,
            "composition.soft_disc_input" => self.composition.soft_disc_input = parse(key, value)?,
            "appearance.iterations" => self.appearance.iterations = parse(key, value)?,
            "appearance.lr" => self.appearance.learning_rate = parse(key, value)?,
            "appearance.batch_size" => self.appearance.batch_size = parse(key, value)?,
            "appearance.base_width" => self.appearance.base_width = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn category_root(&self) -> PathBuf {
        self.dataset_root.join(&self.category)
    }

    /// Hash of the stage-relevant configuration.
    pub fn config_hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        super::fnv1a64(&json)
    }
}
