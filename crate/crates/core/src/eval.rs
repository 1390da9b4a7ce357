//! Policy evaluation and result comparison.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use libm::sqrt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{EnvError, Environment};
use crate::policy::{PolicyError, PolicyParams};
use crate::rng::{Purpose, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub mean: f64,
    pub returns: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_seed: Vec<SeedResult>,
    /// Mean of the per-seed means.
    pub pooled_mean: f64,
    /// Sample standard deviation of the per-seed means (0 for one seed).
    pub pooled_std: f64,
    /// Episodes per seed.
    pub episodes: usize,
    /// Filled in by callers that have a clock.
    pub duration_secs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("checkpoint does not fit the environment: {0}")]
    Mismatch(#[from] PolicyError),
    #[error("environment: {0}")]
    Env(#[from] EnvError),
    #[error("need at least one seed and one episode")]
    Empty,
}

/// Two-pass mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let ss = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    (mean, sqrt(ss / (n - 1.0)))
}

impl EvalResult {
    pub fn from_returns(per_seed: Vec<(u64, Vec<f64>)>) -> Self {
        let episodes = per_seed.first().map_or(0, |(_, r)| r.len());
        let per_seed: Vec<SeedResult> = per_seed
            .into_iter()
            .map(|(seed, returns)| SeedResult { seed, mean: mean_std(&returns).0, returns })
            .collect();
        let means: Vec<f64> = per_seed.iter().map(|s| s.mean).collect();
        let (pooled_mean, pooled_std) = mean_std(&means);
        Self { per_seed, pooled_mean, pooled_std, episodes, duration_secs: None }
    }

    /// `mean (±std)` with two decimals.
    pub fn display(&self) -> String {
        format!("{:.2} (\u{b1}{:.2})", self.pooled_mean, self.pooled_std)
    }
}

/// Runs `episodes` episodes per seed with the distribution mode (or sampled
/// actions when `greedy` is false). No learning, no advisor.
pub fn evaluate(
    params: &PolicyParams,
    env: &mut dyn Environment,
    episodes: usize,
    seeds: &[u64],
    greedy: bool,
) -> Result<EvalResult, EvalError> {
    if episodes == 0 || seeds.is_empty() {
        return Err(EvalError::Empty);
    }
    params.check()?;
    if params.spec.obs_dim != env.observation_dim() {
        return Err(PolicyError::ShapeMismatch { expected: params.spec.obs_dim, got: env.observation_dim() }.into());
    }
    let mut all = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut episode_seeds = RngStream::derive(seed, Purpose::Eval, 0);
        let mut action_rng = RngStream::derive(seed, Purpose::Eval, 1);
        let mut returns = Vec::with_capacity(episodes);
        for _ in 0..episodes {
            let mut state = env.reset(episode_seeds.next_u64());
            let mut total = 0.0;
            loop {
                let (dist, _) = params.forward(&env.observe(&state))?;
                let action = if greedy { dist.mode() } else { dist.sample(&mut action_rng).action };
                let step = env.step(&action)?;
                total += step.reward;
                state = step.state;
                if step.done {
                    break;
                }
            }
            returns.push(total);
        }
        all.push((seed, returns));
    }
    Ok(EvalResult::from_returns(all))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Improvement {
    /// `100 (a - b) / |b|`.
    Percent(f64),
    /// Baseline mean was 0; plain difference `a - b`.
    AbsoluteDifference(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub mean: f64,
    pub std: f64,
    pub display: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub method: String,
    pub baseline: String,
    pub improvement: Improvement,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompareError {
    #[error("need at least two results")]
    TooFew,
    #[error("no result named `{0}`")]
    Unknown(String),
}

pub fn improvement(method_mean: f64, baseline_mean: f64) -> Improvement {
    if baseline_mean == 0.0 {
        Improvement::AbsoluteDifference(method_mean - baseline_mean)
    } else {
        Improvement::Percent(100.0 * (method_mean - baseline_mean) / baseline_mean.abs())
    }
}

/// Table of `mean (±std)` rows plus the improvement of `method` over
/// `baseline`.
pub fn compare(results: &[(String, EvalResult)], method: &str, baseline: &str) -> Result<Comparison, CompareError> {
    if results.len() < 2 {
        return Err(CompareError::TooFew);
    }
    let find = |name: &str| {
        results.iter().find(|(n, _)| n == name).map(|(_, r)| r).ok_or_else(|| CompareError::Unknown(name.into()))
    };
    let m = find(method)?;
    let b = find(baseline)?;
    let rows = results
        .iter()
        .map(|(n, r)| ComparisonRow { method: n.clone(), mean: r.pooled_mean, std: r.pooled_std, display: r.display() })
        .collect();
    Ok(Comparison {
        rows,
        method: method.into(),
        baseline: baseline.into(),
        improvement: improvement(m.pooled_mean, b.pooled_mean),
    })
}
