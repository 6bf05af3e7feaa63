//! User-facing run configuration: model sizes, training schedule, paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::manifest::Dataset;
use crate::dataio::vocab::{DEFAULT_MIN_COUNT, MAX_CAPTION_TOKENS};
use crate::decoder::{ModelConfig, SceneMode};
use crate::error::{Error, Result};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub hidden: usize,
    pub embed: usize,
    pub attn: usize,
    pub concept_dim: usize,
    pub max_len: usize,
    pub tie_output: bool,
    pub length_norm: bool,
    pub scene_mode: SceneMode,
    pub min_count: usize,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            hidden: 1000,
            embed: 1000,
            attn: 512,
            concept_dim: 300,
            max_len: MAX_CAPTION_TOKENS,
            tie_output: false,
            length_norm: false,
            scene_mode: SceneMode::Full,
            min_count: DEFAULT_MIN_COUNT,
            manifest: None,
            out: None,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let sizes = [
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("attn", self.attn),
            ("concept_dim", self.concept_dim),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        Ok(())
    }

    /// Model configuration sized for `dataset`.
    pub fn model_config(&self, dataset: &Dataset) -> ModelConfig {
        let dims = &dataset.manifest.dims;
        ModelConfig {
            hidden: self.hidden,
            embed: self.embed,
            attn: self.attn,
            scenes: dims.s,
            region_dim: dims.region,
            concept_dim: self.concept_dim,
            vocab_size: dataset.vocab.len(),
            num_concepts: dataset.concept_id_bound(),
            max_concepts: dims.k_max.max(1),
            max_len: self.max_len,
            tie_output: self.tie_output,
            length_norm: self.length_norm,
            scene_mode: self.scene_mode,
        }
    }
}
