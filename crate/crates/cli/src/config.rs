//! The TOML config file. Every section is optional and falls back to the
//! desk-scale defaults; unknown keys at any depth are rejected.

use std::path::{Path, PathBuf};

use layoutdiff_core::diffusion::{ModelConfig, SamplerConfig, TrainConfig};
use layoutdiff_core::eval::{AnalyticConfig, ClassifierTrainConfig};
use layoutdiff_core::experiment::ExperimentConfig;
use layoutdiff_core::scenegen::{QueryMode, SceneConfig, SplitSizes};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("unknown config key `{key}` in {path}")]
    UnknownKey { path: PathBuf, key: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub analytic: AnalyticConfig,
    pub classifier: ClassifierTrainConfig,
    /// Scenes whose ground-truth crops train the toy-FID feature network.
    pub classifier_scenes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSection {
    pub modes: Vec<QueryMode>,
    pub guidance_scales: Vec<f64>,
    pub localization_queries: usize,
    pub sample_batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeConfig {
    pub bind: String,
    /// Sampling threads; defaults to the available parallelism.
    pub workers: usize,
    /// Jobs waiting beyond this are refused with 429.
    pub queue_capacity: usize,
    pub static_dir: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            queue_capacity: 64,
            static_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    /// Dataset generation and model initialization.
    pub seed: u64,
    pub scene: SceneConfig,
    pub splits: SplitSizes,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalSection,
    pub experiment: ExperimentSection,
    pub service: ServeConfig,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self::from_experiment(&ExperimentConfig::default())
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self { analytic: AnalyticConfig::default(), classifier: e.classifier, classifier_scenes: e.classifier_scenes }
    }
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            modes: e.modes,
            guidance_scales: e.guidance_scales,
            localization_queries: e.localization_queries,
            sample_batch: e.sample_batch,
        }
    }
}

impl FileConfig {
    pub fn from_experiment(e: &ExperimentConfig) -> Self {
        Self {
            seed: e.seed,
            scene: e.scene.clone(),
            splits: e.splits,
            model: e.model.clone(),
            train: e.train.clone(),
            sampler: e.sampler.clone(),
            eval: EvalSection {
                analytic: AnalyticConfig::default(),
                classifier: e.classifier.clone(),
                classifier_scenes: e.classifier_scenes,
            },
            experiment: ExperimentSection {
                modes: e.modes.clone(),
                guidance_scales: e.guidance_scales.clone(),
                localization_queries: e.localization_queries,
                sample_batch: e.sample_batch,
            },
            service: ServeConfig::default(),
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            seed: self.seed,
            scene: self.scene.clone(),
            splits: self.splits,
            model: self.model.clone(),
            train: self.train.clone(),
            sampler: self.sampler.clone(),
            modes: self.experiment.modes.clone(),
            guidance_scales: self.experiment.guidance_scales.clone(),
            localization_queries: self.experiment.localization_queries,
            classifier: self.eval.classifier.clone(),
            classifier_scenes: self.eval.classifier_scenes,
            sample_batch: self.experiment.sample_batch,
        }
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::new(text);
        let mut unknown = Vec::new();
        let cfg: Self = serde_ignored::deserialize(de, |p| unknown.push(p.to_string()))
            .map_err(|e| ConfigError::Parse { path: path.to_path_buf(), detail: e.to_string() })?;
        if let Some(key) = unknown.into_iter().next() {
            return Err(ConfigError::UnknownKey { path: path.to_path_buf(), key });
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is representable as TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.experiment().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.service.workers == 0 || self.service.queue_capacity == 0 {
            return Err(ConfigError::Invalid("service workers and queue_capacity must be positive".into()));
        }
        Ok(())
    }
}
