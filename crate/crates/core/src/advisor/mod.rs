//! Prompts, response grammar, advisor backends and the query client.

pub mod client;
pub mod grammar;
pub mod oracle;
pub mod prompt;

use alloc::string::String;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{Action, EnvKind};

pub use client::{AdvisorClient, Backend, BackendError, MemoryCache, QueryStats, ResponseCache, RetryPolicy};
pub use grammar::{parse_case_analysis, parse_identification, parse_reward, render_annotations, Identification};
pub use oracle::{OracleBackend, OracleParams};
pub use prompt::{
    build_case_analysis_prompt, build_identification_prompt, build_reward_prompt, content_hash, AdvisorPrompt,
    PromptKind,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalAnnotation {
    pub timeslot: usize,
    pub critical: bool,
    pub corrected_action: Option<Action>,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardJudgment {
    pub timeslot: usize,
    pub reward: f64,
    pub analysis: String,
    /// Set when the parsed value lay outside [-1, 1].
    pub clamped_from: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseAnalysis {
    pub episode_id: u64,
    pub text: String,
}

impl CaseAnalysis {
    pub fn empty(episode_id: u64) -> Self {
        Self { episode_id, text: String::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdvisorError {
    #[error("prompt window [{begin}, {end}) is empty or outside the trajectory")]
    EmptyWindow { begin: usize, end: usize },
    #[error("episode {0} has not terminated")]
    IncompleteEpisode(u64),
    #[error("no well-formed records in response")]
    Parse,
    #[error("no numeric reward in response")]
    MissingReward,
    #[error("network failure after {attempts} attempts: {message}")]
    Network { attempts: u32, message: String },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("oracle does not support environment `{0}`")]
    UnsupportedEnv(EnvKind),
    #[error("backend error: {0}")]
    Backend(String),
}
