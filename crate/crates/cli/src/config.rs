//! The JSON run configuration consumed by `rfop train`.

use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use rfop_core::loss::LossWeights;
use rfop_core::model::ModelConfig;
use rfop_core::sampler::PairSampler;
use rfop_core::train::TrainPlan;
use rfop_core::Real;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Paths {
    pub train_manifest: PathBuf,
    pub train_blob: PathBuf,
    pub val_manifest: PathBuf,
    pub val_blob: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Languages {
    pub train_lang: String,
    #[serde(default)]
    pub test_langs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub loss_weights: LossWeights<Real>,
    #[serde(default)]
    pub plan: TrainPlan<Real>,
    #[serde(default)]
    pub sampler: PairSampler,
    pub paths: Paths,
    pub languages: Languages,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.loss_weights.validate().map_err(|e| e.to_string())?;
        self.plan.validate().map_err(|e| e.to_string())?;
        self.sampler
            .validate(self.plan.batch_size)
            .map_err(|e| e.to_string())?;
        let paths = [
            &self.paths.train_manifest,
            &self.paths.train_blob,
            &self.paths.val_manifest,
            &self.paths.val_blob,
        ];
        let distinct: HashSet<&PathBuf> = paths.iter().copied().collect();
        if distinct.len() != paths.len() {
            return Err("config paths must all be distinct".into());
        }
        if self.languages.train_lang.is_empty() {
            return Err("languages.train_lang must be set".into());
        }
        Ok(())
    }

    /// A single seed flag pins both the init and the sampling streams.
    pub fn override_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.plan.seed = seed;
    }
}
