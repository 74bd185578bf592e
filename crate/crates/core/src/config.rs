//! Run configuration for the end-to-end pipeline. A single JSON document;
//! every field has a default, so `{}` is a valid config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierTrainConfig;
use crate::detectors::{BankMode, DetectorTrainConfig};
use crate::error::{Error, Result};
use crate::explain::SmoothGradConfig;
use crate::perturb::{MagnitudeGrid, PerturbationKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// In-distribution classes, 2 to 6.
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub ood_count: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            train_per_class: 60,
            test_per_class: 30,
            ood_count: 90,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub kind: PerturbationKind,
    pub values: Vec<f64>,
}

impl GridConfig {
    pub fn grid(&self) -> Result<MagnitudeGrid> {
        MagnitudeGrid::new(self.kind, self.values.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    /// Reference images kept per detector.
    pub top_k: usize,
    pub smoothgrad: SmoothGradConfig,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            top_k: 3,
            smoothgrad: SmoothGradConfig::default(),
        }
    }
}

/// Feature archives used in place of images and the toy classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveConfig {
    pub train: PathBuf,
    pub iod: PathBuf,
    pub ood: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Number of training seeds; seed `i` is `base_seed + i`.
    pub seeds: usize,
    pub base_seed: u64,
    /// Detectors per class, one full run per value.
    pub detector_counts: Vec<usize>,
    pub modes: Vec<BankMode>,
    pub data: DataConfig,
    /// Reuse images from this directory instead of generating them.
    pub data_dir: Option<PathBuf>,
    pub archives: Option<ArchiveConfig>,
    pub classifier: ClassifierTrainConfig,
    pub detectors: DetectorTrainConfig,
    pub perturbations: Vec<GridConfig>,
    /// Seed of the perturbation noise, shared by every model seed.
    pub perturb_seed: u64,
    pub explain: ExplainConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: 3,
            base_seed: 0,
            detector_counts: vec![4],
            modes: vec![BankMode::Vanilla, BankMode::ClassBased],
            data: DataConfig::default(),
            data_dir: None,
            archives: None,
            classifier: ClassifierTrainConfig::default(),
            detectors: DetectorTrainConfig::default(),
            perturbations: PerturbationKind::ALL
                .iter()
                .map(|k| GridConfig {
                    kind: *k,
                    values: k.default_grid().values().to_vec(),
                })
                .collect(),
            perturb_seed: 0,
            explain: ExplainConfig::default(),
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64)
            .map(|i| self.base_seed.wrapping_add(i))
            .collect()
    }

    pub fn grids(&self) -> Result<Vec<MagnitudeGrid>> {
        self.perturbations.iter().map(GridConfig::grid).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be >= 1".into()));
        }
        if self.detector_counts.is_empty() || self.detector_counts.contains(&0) {
            return Err(Error::Config(
                "detector_counts must be non-empty and positive".into(),
            ));
        }
        if self.modes.is_empty() {
            return Err(Error::Config(
                "at least one detector mode is required".into(),
            ));
        }
        let mut modes = self.modes.clone();
        modes.dedup();
        if modes.len() != self.modes.len() {
            return Err(Error::Config("duplicate detector mode".into()));
        }
        let d = &self.data;
        if d.train_per_class == 0 || d.test_per_class == 0 || d.ood_count == 0 {
            return Err(Error::Config("dataset sizes must be >= 1".into()));
        }
        if self.explain.top_k == 0 {
            return Err(Error::Config("explain.top_k must be >= 1".into()));
        }
        self.classifier.validate()?;
        self.detectors.validate()?;
        // grid violations surface as configuration errors
        self.grids().map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })?;
        Ok(())
    }
}
