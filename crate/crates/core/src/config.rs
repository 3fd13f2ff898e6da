//! TOML experiment configuration shared by the CLI and the acceptance
//! suite.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{DitConfig, ModelConfig, TrainConfig};
use crate::harness::EvalConfig;
use crate::simulator::{generate_dataset, Dataset, RfConfig, ScenarioConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Scenes in the training set; each contributes ten channel frames.
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub ood_scenes: usize,
    pub seed: u64,
    pub rf: RfConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_scenes: 2000, test_scenes: 200, ood_scenes: 200, seed: 7, rf: RfConfig::default() }
    }
}

impl DataConfig {
    /// Seeds of the three splits; the held-out sets never share scenes with
    /// training.
    pub fn split_seed(&self, split: &str) -> u64 {
        crate::rng::stream_seed(self.seed, 0, split)
    }

    /// Generate a split: `train` and `test` are urban, `ood` is the rural
    /// scenario.
    pub fn generate(&self, split: &str) -> Result<Dataset> {
        let (scenario, scenes) = match split {
            "train" => (ScenarioConfig::urban(), self.train_scenes),
            "test" => (ScenarioConfig::urban(), self.test_scenes),
            "ood" => (ScenarioConfig::ood_rural(), self.ood_scenes),
            other => return Err(Error::Config(format!("unknown split '{other}'"))),
        };
        generate_dataset(&scenario, &self.rf, scenes, self.split_seed(split))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// `"toy"` or `"paper"`; selects the DiT size when `[model.dit]` is absent.
    pub preset: Option<String>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: toml::Table = toml::from_str(text)?;
        let mut cfg: Self = toml::from_str(text)?;
        let has_dit = raw.get("model").and_then(|m| m.get("dit")).is_some();
        match cfg.preset.as_deref() {
            None | Some("toy") => {}
            Some("paper") if !has_dit => {
                cfg.model.dit = DitConfig::paper_scale();
                if raw.get("train").and_then(|t| t.get("batch")).is_none() {
                    cfg.train.batch = 96;
                }
            }
            Some("paper") => {}
            Some(other) => return Err(Error::Config(format!("unknown preset '{other}'"))),
        }
        cfg.model.n_r = cfg.data.rf.n_r;
        cfg.model.n_t = cfg.data.rf.n_t;
        cfg.model.n_c = cfg.data.rf.n_c;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.rf.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }
}
