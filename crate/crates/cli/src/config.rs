//! Run configuration, read from TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use refine_core::advisor::{OracleParams, RetryPolicy};
use refine_core::envs::{HopperConfig, PongConfig};
use refine_core::policy::{InitScheme, PpoConfig, TrainConfig};
use refine_core::refine::{RefineConfig, Variant};
use refine_core::EnvKind;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable holding the bearer token for the HTTP advisor.
pub const API_KEY_VAR: &str = "ADVISOR_API_KEY";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// A fine-tuning arm: the unguided control or one refinement variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Ppo,
    Refine(Variant),
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Ppo => "ppo",
            Method::Refine(v) => v.name(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ppo" => Ok(Method::Ppo),
            "a" => Ok(Method::Refine(Variant::A)),
            "r" => Ok(Method::Refine(Variant::R)),
            "ra" => Ok(Method::Refine(Variant::RA)),
            _ => Err(format!("unknown method `{s}` (expected ppo, A, R or RA)")),
        }
    }
}

impl TryFrom<String> for Method {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> Self {
        m.label().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Oracle,
    Http,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(BackendKind::Oracle),
            "http" => Ok(BackendKind::Http),
            _ => Err(format!("unknown backend `{s}` (expected oracle or http)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    /// Minimum spacing between requests.
    pub min_interval_ms: u64,
    pub system_prompt: String,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            temperature: 0.0,
            timeout_secs: 60,
            min_interval_ms: 200,
            system_prompt: "You are an expert advisor for reinforcement-learning agents.".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvisorConfig {
    pub backend: BackendKind,
    pub oracle: OracleParams,
    pub http: HttpConfig,
    pub retry: RetryPolicy,
    /// Use the on-disk response cache.
    pub cache: bool,
}

impl Default for AdvisorConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Oracle,
            oracle: OracleParams::default(),
            http: HttpConfig::default(),
            retry: RetryPolicy::default(),
            cache: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub hidden: usize,
    pub init: InitScheme,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { hidden: 64, init: InitScheme::Orthogonal }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub steps_per_iter: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { iterations: 3, steps_per_iter: 2048 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentifyConfig {
    /// Episodes collected from the pretrained policy for identification.
    pub rollout_episodes: usize,
    /// Timesteps per identification prompt.
    pub window: usize,
    /// Episodes fed to case analysis.
    pub analysis_episodes: usize,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        Self { rollout_episodes: 30, window: 50, analysis_episodes: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSection {
    pub methods: Vec<Method>,
    pub alpha: f64,
    pub iterations: usize,
    pub steps_per_iter: usize,
    pub epsilon: f64,
    pub rebuild_every: Option<usize>,
    pub reward_budget: Option<u64>,
    /// Write every fine-tuning transition to a JSONL file.
    pub log_transitions: bool,
}

impl Default for RefineSection {
    fn default() -> Self {
        Self {
            methods: vec![Method::Ppo, Method::Refine(Variant::A), Method::Refine(Variant::R), Method::Refine(Variant::RA)],
            alpha: 0.5,
            iterations: 30,
            steps_per_iter: 2048,
            epsilon: 0.05,
            rebuild_every: Some(1),
            reward_budget: None,
            log_transitions: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Distribution mode (argmax or mean) instead of sampling.
    pub greedy: bool,
    /// Evaluate the pretrained checkpoint as well.
    pub include_pretrained: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 100, greedy: true, include_pretrained: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Method whose improvement over `baseline` is reported.
    pub method: Method,
    pub baseline: Method,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { method: Method::Refine(Variant::RA), baseline: Method::Ppo }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Root for every artifact; relative paths resolve against the config file.
    pub out_dir: PathBuf,
    /// Response cache root; relative paths resolve against `out_dir`.
    pub cache_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("runs/default"), cache_dir: PathBuf::from("cache") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvKind,
    pub seeds: Vec<u64>,
    pub paths: PathsConfig,
    pub pong: PongConfig,
    pub hopper: HopperConfig,
    pub net: NetConfig,
    pub ppo: PpoConfig,
    pub pretrain: PretrainConfig,
    pub identify: IdentifyConfig,
    pub refine: RefineSection,
    pub eval: EvalConfig,
    pub report: ReportConfig,
    pub advisor: AdvisorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::Pong,
            seeds: vec![0, 1, 2],
            paths: PathsConfig::default(),
            pong: PongConfig::default(),
            hopper: HopperConfig::default(),
            net: NetConfig::default(),
            ppo: PpoConfig::default(),
            pretrain: PretrainConfig::default(),
            identify: IdentifyConfig::default(),
            refine: RefineSection::default(),
            eval: EvalConfig::default(),
            report: ReportConfig::default(),
            advisor: AdvisorConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Reads and validates a config file. A relative `out_dir` is resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        let mut config =
            Self::from_toml(&text).map_err(|message| ConfigError::Parse { path: path.into(), message })?;
        if config.paths.out_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            config.paths.out_dir = base.join(&config.paths.out_dir);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.eval.episodes == 0 {
            return bad("eval.episodes must be at least 1");
        }
        if self.refine.methods.is_empty() {
            return bad("refine.methods must not be empty");
        }
        if !(self.refine.alpha.is_finite() && self.refine.alpha >= 0.0) {
            return bad("refine.alpha must be finite and non-negative");
        }
        if !(self.refine.epsilon.is_finite() && self.refine.epsilon >= 0.0) {
            return bad("refine.epsilon must be finite and non-negative");
        }
        if self.identify.window == 0 {
            return bad("identify.window must be at least 1");
        }
        if self.net.hidden == 0 {
            return bad("net.hidden must be at least 1");
        }
        if self.pretrain.steps_per_iter == 0 || self.refine.steps_per_iter == 0 {
            return bad("steps_per_iter must be at least 1");
        }
        if let Err(field) = self.ppo.validate() {
            return Err(ConfigError::Invalid(format!("ppo.{field} is out of range")));
        }
        if self.advisor.retry.max_attempts == 0 {
            return bad("advisor.retry.max_attempts must be at least 1");
        }
        Ok(())
    }

    /// Canonical JSON echo embedded in artifacts.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is serializable")
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.paths.out_dir.join(&self.paths.cache_dir)
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.pretrain.iterations,
            steps_per_iter: self.pretrain.steps_per_iter,
            ppo: self.ppo.clone(),
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig { iterations: self.refine.iterations, steps_per_iter: self.refine.steps_per_iter, ppo: self.ppo.clone() }
    }

    pub fn refine_config(&self, variant: Variant) -> RefineConfig {
        RefineConfig {
            variant,
            alpha: self.refine.alpha,
            train: self.finetune_config(),
            epsilon: self.refine.epsilon,
            window: self.identify.window,
            rebuild_every: self.refine.rebuild_every,
            reward_budget: self.refine.reward_budget,
            seeds: self.seeds.clone(),
        }
    }
}
