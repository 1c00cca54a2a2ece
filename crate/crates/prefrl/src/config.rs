//! Experiment configuration, stored as TOML.

use std::path::{Path, PathBuf};

use prefrl_core::gridworld::EnvConfig;
use prefrl_core::policy::{ConstraintSpec, PpoConfig};
use prefrl_core::reward_model::TrainConfig;
use prefrl_core::sampler::SamplerConfig;
use prefrl_core::TaskId;
use serde::{Deserialize, Serialize};

use crate::llm::EndpointConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    Scripted,
    Llm,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub kind: OracleKind,
    /// Cache file; relative paths resolve against the output directory.
    pub cache_path: PathBuf,
    #[serde(flatten)]
    pub endpoint: EndpointConfig,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { kind: OracleKind::Scripted, cache_path: "oracle_cache.jsonl".into(), endpoint: EndpointConfig::default() }
    }
}

/// Reward sources compared in phase 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Predictor,
    Original,
    Shaped,
    Lagrange,
    Random,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Predictor => "predictor",
            Method::Original => "original",
            Method::Shaped => "shaped",
            Method::Lagrange => "lagrange",
            Method::Random => "random",
        }
    }
}

/// How trajectory pairs are drawn. The snapshot run uses `ppo` when given,
/// otherwise the experiment's PPO settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SamplerSection {
    #[serde(flatten)]
    pub mix: SamplerConfig,
    pub ppo: Option<PpoConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskId,
    /// Overrides the task's default episode limit.
    pub max_steps: Option<u32>,
    /// Number of preference pairs to query.
    pub pairs: u64,
    pub oracle: OracleConfig,
    pub sampler: SamplerSection,
    pub reward_model: TrainConfig,
    pub ppo: PpoConfig,
    pub constraint: Option<ConstraintSpec>,
    pub methods: Vec<Method>,
    pub lagrange_multiplier: f64,
    pub seeds: Vec<u64>,
    /// Seed of the preference phase (sampling and reward-model init).
    pub data_seed: u64,
    pub workers: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskId::Unlock,
            max_steps: None,
            pairs: 2000,
            oracle: OracleConfig::default(),
            sampler: SamplerSection::default(),
            reward_model: TrainConfig::default(),
            ppo: PpoConfig::default(),
            constraint: None,
            methods: vec![Method::Predictor, Method::Original],
            lagrange_multiplier: 0.1,
            seeds: vec![0, 1, 2],
            data_seed: 0,
            workers: 1,
            output_dir: "runs/experiment".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_toml_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn env(&self) -> EnvConfig {
        let env = EnvConfig::new(self.task);
        match self.max_steps {
            Some(m) => env.with_max_steps(m),
            None => env,
        }
    }

    pub fn sampler_ppo(&self) -> PpoConfig {
        self.sampler.ppo.unwrap_or(self.ppo)
    }

    pub fn cache_path(&self) -> PathBuf {
        if self.oracle.cache_path.is_absolute() {
            self.oracle.cache_path.clone()
        } else {
            self.output_dir.join(&self.oracle.cache_path)
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |msg: String| Err(ConfigError::Invalid(msg));
        self.env().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.ppo.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.sampler_ppo().validate().map_err(|e| ConfigError::Invalid(format!("sampler.ppo: {e}")))?;
        self.sampler.mix.validate().map_err(|e| ConfigError::Invalid(format!("sampler: {e}")))?;
        self.reward_model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.seeds.is_empty() {
            return invalid("seeds must not be empty".into());
        }
        if self.methods.is_empty() {
            return invalid("methods must not be empty".into());
        }
        if self.methods.contains(&Method::Predictor) && self.pairs == 0 {
            return invalid("the predictor method needs pairs > 0".into());
        }
        if self.constraint.is_some() && self.task != TaskId::Unlock {
            return invalid("the key-drop constraint only applies to the unlock task".into());
        }
        if self.methods.contains(&Method::Lagrange) && self.constraint.is_none() {
            return invalid("the lagrange method needs a constraint".into());
        }
        if !(self.lagrange_multiplier >= 0.0) {
            return invalid("lagrange_multiplier must be nonnegative".into());
        }
        if self.workers == 0 {
            return invalid("workers must be positive".into());
        }
        if self.oracle.kind == OracleKind::Llm {
            self.oracle.endpoint.validate().map_err(ConfigError::Invalid)?;
        }
        Ok(())
    }
}
