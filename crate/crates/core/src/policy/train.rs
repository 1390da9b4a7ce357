//! On-policy collection loop shared by plain PPO and guided refinement.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::gae::gae;
use super::net::{LearnAction, PolicyError, PolicyParams};
use super::ppo::{ppo_update, Learner, PpoConfig, RolloutBatch, UpdateStats};
use crate::mdp::{Action, EnvError, Environment, State, TerminalReason, Trajectory, TrajectoryError, Transition};
use crate::rng::{Purpose, RngStream};

/// What a guide says about one step, decided before the environment moves.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Advice {
    /// Replacement for the policy's action.
    pub action: Option<Action>,
    /// Advisor reward for the executed action; `Some` marks the step as
    /// shaped.
    pub llm_reward: Option<f64>,
}

/// Running totals reported by a guide.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceCounters {
    pub matched_states: u64,
    pub advisor_queries: u64,
    pub cache_hits: u64,
}

/// Hook consulted at every collected step.
pub trait Guidance {
    fn advise(&mut self, episode: u64, timestep: usize, state: &State, policy_action: &Action) -> Advice;

    /// Reward stored for learning.
    fn shape(&self, env_reward: f64, _advice: &Advice) -> f64 {
        env_reward
    }

    fn counters(&self) -> GuidanceCounters {
        GuidanceCounters::default()
    }

    /// Called after each iteration's rollouts, before the update.
    fn end_iteration(&mut self, _iter: usize, _trajectories: &[Trajectory]) {}
}

/// Plain PPO.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoGuidance;

impl Guidance for NoGuidance {
    fn advise(&mut self, _: u64, _: usize, _: &State, _: &Action) -> Advice {
        Advice::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub steps_per_iter: usize,
    pub ppo: PpoConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { iterations: 10, steps_per_iter: 2048, ppo: PpoConfig::default() }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iter: usize,
    pub episodes: usize,
    pub matched_states: u64,
    pub advisor_queries: u64,
    pub cache_hits: u64,
    /// Mean environment return over episodes finished this iteration, 0 when
    /// none finished.
    pub mean_return: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("policy: {0}")]
    Policy(#[from] PolicyError),
    #[error("environment: {0}")]
    Env(#[from] EnvError),
    #[error("trajectory: {0}")]
    Trajectory(#[from] TrajectoryError),
    #[error("invalid training config field `{0}`")]
    Config(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub log: Vec<IterationLog>,
    pub updates: Vec<UpdateStats>,
}

/// Collects `steps_per_iter` environment steps per iteration, then runs one
/// PPO update. Every trajectory (including the truncated last one of each
/// iteration) is passed to `observer` in collection order.
pub fn train(
    params: PolicyParams,
    env: &mut dyn Environment,
    guidance: &mut dyn Guidance,
    config: &TrainConfig,
    seed: u64,
    observer: &mut dyn FnMut(&Trajectory),
) -> Result<TrainOutcome, TrainError> {
    config.ppo.validate().map_err(TrainError::Config)?;
    if config.steps_per_iter == 0 {
        return Err(TrainError::Config("steps_per_iter"));
    }
    params.check()?;
    if params.spec.obs_dim != env.observation_dim() {
        return Err(PolicyError::ShapeMismatch { expected: params.spec.obs_dim, got: env.observation_dim() }.into());
    }
    let mut episode_seeds = RngStream::derive(seed, Purpose::Reset, 0);
    let mut learner = Learner::new(params);
    let mut log = Vec::with_capacity(config.iterations);
    let mut updates = Vec::with_capacity(config.iterations);
    let mut episode_id: u64 = 0;

    for iter in 0..config.iterations {
        let mut policy_rng = RngStream::derive(seed, Purpose::Policy, iter as u64);
        let before = guidance.counters();
        let mut batch = RolloutBatch::default();
        let mut segments: Vec<(usize, usize, f64)> = Vec::new();
        let mut trajectories = Vec::new();
        let mut finished_returns = Vec::new();

        while batch.len() < config.steps_per_iter {
            let ep_seed = episode_seeds.next_u64();
            let mut state = env.reset(ep_seed);
            let mut traj = Trajectory::new(episode_id, ep_seed);
            let start = batch.len();
            let mut bootstrap = 0.0;
            loop {
                let obs = env.observe(&state);
                let (dist, value) = learner.params.forward(&obs)?;
                let sampled = dist.sample(&mut policy_rng);
                let advice = guidance.advise(episode_id, traj.len(), &state, &sampled.action);
                let (executed, learn, log_prob) = match &advice.action {
                    Some(a) => {
                        let learn = LearnAction::from_action(a);
                        let lp = dist.log_prob(&learn)?;
                        (a.clone(), learn, lp)
                    }
                    None => (sampled.action.clone(), sampled.learn, sampled.log_prob),
                };
                let step = env.step(&executed)?;
                let shaped = guidance.shape(step.reward, &advice);
                let done = step.done;
                traj.record(Transition {
                    state: core::mem::replace(&mut state, step.state.clone()),
                    policy_action: sampled.action,
                    executed_action: executed,
                    env_reward: step.reward,
                    shaped_reward: shaped,
                    next_state: step.state,
                    done,
                    timestep: traj.len(),
                })?;
                batch.observations.push(obs);
                batch.actions.push(learn);
                batch.log_probs.push(log_prob);
                batch.rewards.push(shaped);
                batch.values.push(value);
                if done {
                    traj.terminal_reason = step.reason.or(Some(TerminalReason::StepLimit));
                    break;
                }
                if batch.len() >= config.steps_per_iter {
                    bootstrap = learner.params.forward(&env.observe(&state))?.1;
                    break;
                }
            }
            if traj.is_complete() {
                finished_returns.push(traj.total_env_reward());
            }
            segments.push((start, batch.len(), bootstrap));
            observer(&traj);
            trajectories.push(traj);
            episode_id += 1;
        }

        for &(s, e, last) in &segments {
            let (adv, ret) = gae(&batch.rewards[s..e], &batch.values[s..e], last, config.ppo.gamma, config.ppo.lambda);
            batch.advantages.extend(adv);
            batch.returns.extend(ret);
        }

        guidance.end_iteration(iter, &trajectories);
        let mut minibatch_rng = RngStream::derive(seed, Purpose::Minibatch, iter as u64);
        updates.push(ppo_update(&mut learner, &batch, &config.ppo, &mut minibatch_rng)?);

        let after = guidance.counters();
        let mean_return = if finished_returns.is_empty() {
            0.0
        } else {
            finished_returns.iter().sum::<f64>() / finished_returns.len() as f64
        };
        log.push(IterationLog {
            iter,
            episodes: finished_returns.len(),
            matched_states: after.matched_states - before.matched_states,
            advisor_queries: after.advisor_queries - before.advisor_queries,
            cache_hits: after.cache_hits - before.cache_hits,
            mean_return,
        });
    }
    Ok(TrainOutcome { params: learner.into_params(), log, updates })
}

/// Runs `episodes` full episodes with sampled actions and no learning.
pub fn collect(
    params: &PolicyParams,
    env: &mut dyn Environment,
    episodes: usize,
    seed: u64,
) -> Result<Vec<Trajectory>, TrainError> {
    params.check()?;
    if params.spec.obs_dim != env.observation_dim() {
        return Err(PolicyError::ShapeMismatch { expected: params.spec.obs_dim, got: env.observation_dim() }.into());
    }
    let mut episode_seeds = RngStream::derive(seed, Purpose::Reset, 0);
    let mut policy_rng = RngStream::derive(seed, Purpose::Policy, 0);
    let mut out = Vec::with_capacity(episodes);
    for episode_id in 0..episodes as u64 {
        let ep_seed = episode_seeds.next_u64();
        let mut state = env.reset(ep_seed);
        let mut traj = Trajectory::new(episode_id, ep_seed);
        loop {
            let (dist, _) = params.forward(&env.observe(&state))?;
            let sampled = dist.sample(&mut policy_rng);
            let step = env.step(&sampled.action)?;
            let done = step.done;
            traj.record(Transition {
                state: core::mem::replace(&mut state, step.state.clone()),
                policy_action: sampled.action.clone(),
                executed_action: sampled.action,
                env_reward: step.reward,
                shaped_reward: step.reward,
                next_state: step.state,
                done,
                timestep: traj.len(),
            })?;
            if done {
                traj.terminal_reason = step.reason.or(Some(TerminalReason::StepLimit));
                break;
            }
        }
        out.push(traj);
    }
    Ok(out)
}

/// Standard PPO without guidance; a zero budget returns `params` unchanged.
pub fn pretrain(
    params: PolicyParams,
    env: &mut dyn Environment,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    train(params, env, &mut NoGuidance, config, seed, &mut |_| {})
}
