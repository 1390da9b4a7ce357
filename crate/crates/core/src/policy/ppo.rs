//! Clipped-surrogate PPO update with an Adam optimizer.

use alloc::vec;
use alloc::vec::Vec;
use libm::{exp, sqrt};

use serde::{Deserialize, Serialize};

use super::net::{Distribution, LearnAction, PolicyError, PolicyParams};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub minibatch_size: usize,
    pub epochs: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// Global gradient-norm clip; `None` disables it.
    pub max_grad_norm: Option<f64>,
    pub normalize_advantages: bool,
    pub adam: AdamConfig,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            learning_rate: 1e-4,
            minibatch_size: 64,
            epochs: 4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: Some(0.5),
            normalize_advantages: true,
            adam: AdamConfig::default(),
        }
    }
}

impl PpoConfig {
    /// Returns the name of the first out-of-range field.
    pub fn validate(&self) -> Result<(), &'static str> {
        if !(self.clip > 0.0 && self.clip <= 1.0) {
            return Err("clip");
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err("lambda");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err("gamma");
        }
        if !(self.learning_rate > 0.0) {
            return Err("learning_rate");
        }
        if self.minibatch_size == 0 {
            return Err("minibatch_size");
        }
        Ok(())
    }
}

/// On-policy samples aligned by index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBatch {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<LearnAction>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn is_consistent(&self) -> bool {
        let n = self.len();
        [
            self.actions.len(),
            self.log_probs.len(),
            self.rewards.len(),
            self.values.len(),
            self.advantages.len(),
            self.returns.len(),
        ]
        .iter()
        .all(|l| *l == n)
            && self.advantages.iter().all(|a| a.is_finite())
    }
}

/// `min(ratio * adv, clip(ratio, 1 - eps, 1 + eps) * adv)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    (ratio * advantage).min(clipped * advantage)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

impl LossStats {
    pub fn total(&self, cfg: &PpoConfig) -> f64 {
        self.policy_loss + cfg.value_coef * self.value_loss - cfg.entropy_coef * self.entropy
    }
}

/// Per-minibatch advantage standardization (mean 0, std 1).
pub fn normalize(adv: &[f64]) -> Vec<f64> {
    let n = adv.len() as f64;
    if adv.is_empty() {
        return Vec::new();
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = sqrt(var);
    adv.iter().map(|a| (a - mean) / (std + 1e-8)).collect()
}

/// Loss over the samples at `indices` and its gradient with respect to all
/// parameters. The loss is
/// `mean(-surrogate) + value_coef * mean(0.5 (V - R)^2) - entropy_coef * mean(H)`.
pub fn loss_and_grad(
    params: &PolicyParams,
    batch: &RolloutBatch,
    indices: &[usize],
    cfg: &PpoConfig,
) -> Result<(LossStats, Vec<f64>), PolicyError> {
    if indices.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let raw: Vec<f64> = indices.iter().map(|&i| batch.advantages[i]).collect();
    let adv = if cfg.normalize_advantages { normalize(&raw) } else { raw };
    let m = indices.len() as f64;
    let mut grad = vec![0.0; params.data.len()];
    let mut stats = LossStats::default();

    for (k, &i) in indices.iter().enumerate() {
        let (dist, value, cache) = params.forward_cached(&batch.observations[i])?;
        let action = &batch.actions[i];
        let logp = dist.log_prob(action)?;
        let log_ratio = logp - batch.log_probs[i];
        let ratio = exp(log_ratio);
        let a = adv[k];
        let unclipped = ratio * a;
        let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * a;
        stats.policy_loss -= unclipped.min(clipped) / m;
        stats.approx_kl += (ratio - 1.0 - log_ratio) / m;
        if unclipped > clipped {
            stats.clip_fraction += 1.0 / m;
        }
        // d(-surrogate)/d(logp): only the unclipped branch depends on parameters.
        let d_logp = if unclipped <= clipped { -a * ratio / m } else { 0.0 };

        let ret = batch.returns[i];
        stats.value_loss += 0.5 * (value - ret) * (value - ret) / m;
        let d_value = cfg.value_coef * (value - ret) / m;

        let entropy = dist.entropy();
        stats.entropy += entropy / m;
        let d_ent = -cfg.entropy_coef / m;

        let (d_head, d_log_std) = match (&dist, action) {
            (Distribution::Categorical { probs, .. }, LearnAction::Index(idx)) => {
                let logs: Vec<f64> = probs.iter().map(|p| if *p > 0.0 { libm::log(*p) } else { 0.0 }).collect();
                let d: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(j, p)| {
                        let onehot = if j == *idx { 1.0 } else { 0.0 };
                        d_logp * (onehot - p) + d_ent * (-p * (logs[j] + entropy))
                    })
                    .collect();
                (d, Vec::new())
            }
            (Distribution::Gaussian { mean, log_std }, LearnAction::Vector(x)) => {
                let mut dm = Vec::with_capacity(mean.len());
                let mut ds = Vec::with_capacity(mean.len());
                for ((mu, ls), xi) in mean.iter().zip(log_std).zip(x) {
                    let sigma = exp(*ls);
                    let z = (xi - mu) / sigma;
                    dm.push(d_logp * z / sigma);
                    ds.push(d_logp * (z * z - 1.0) + d_ent);
                }
                (dm, ds)
            }
            _ => return Err(PolicyError::ActionMismatch),
        };
        params.backward(&cache, &d_head, d_value, &d_log_std, &mut grad);
    }
    Ok((stats, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &AdamConfig) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - libm::pow(cfg.beta1, f64::from(t));
        let bc2 = 1.0 - libm::pow(cfg.beta2, f64::from(t));
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (sqrt(vh) + cfg.eps);
        }
    }
}

/// Parameters plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub params: PolicyParams,
    adam: Adam,
}

impl Learner {
    pub fn new(params: PolicyParams) -> Self {
        let n = params.data.len();
        Self { params, adam: Adam::new(n) }
    }

    pub fn into_params(self) -> PolicyParams {
        self.params
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub loss: LossStats,
    pub minibatches: usize,
    pub grad_norm: f64,
}

/// Runs `epochs` passes of shuffled minibatch gradient steps over `batch`.
/// Reported statistics are averaged over minibatches.
pub fn ppo_update(
    learner: &mut Learner,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    rng: &mut RngStream,
) -> Result<UpdateStats, PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut out = UpdateStats::default();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for (mb, chunk) in order.chunks(cfg.minibatch_size).enumerate() {
            let (stats, mut grad) = loss_and_grad(&learner.params, batch, chunk, cfg)?;
            if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
                return Err(PolicyError::NonFiniteGradient {
                    block: learner.params.block_name(index),
                    index,
                    epoch,
                    minibatch: mb,
                });
            }
            let norm = sqrt(grad.iter().map(|g| g * g).sum::<f64>());
            if let Some(max) = cfg.max_grad_norm {
                if norm > max {
                    let scale = max / norm;
                    grad.iter_mut().for_each(|g| *g *= scale);
                }
            }
            learner.adam.step(&mut learner.params.data, &grad, cfg.learning_rate, &cfg.adam);
            out.minibatches += 1;
            out.grad_norm += norm;
            out.loss.policy_loss += stats.policy_loss;
            out.loss.value_loss += stats.value_loss;
            out.loss.entropy += stats.entropy;
            out.loss.approx_kl += stats.approx_kl;
            out.loss.clip_fraction += stats.clip_fraction;
        }
    }
    if out.minibatches > 0 {
        let n = out.minibatches as f64;
        out.grad_norm /= n;
        out.loss.policy_loss /= n;
        out.loss.value_loss /= n;
        out.loss.entropy /= n;
        out.loss.approx_kl /= n;
        out.loss.clip_fraction /= n;
    }
    Ok(out)
}
