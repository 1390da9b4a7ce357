//! Generalized advantage estimation.

use alloc::vec;
use alloc::vec::Vec;

/// Advantages and returns for one contiguous segment.
///
/// `last_value` bootstraps the state after the final reward: zero for a
/// terminal segment, the critic's estimate for a truncated one.
pub fn gae(rewards: &[f64], values: &[f64], last_value: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len(), "rewards and values must align");
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { last_value };
        let delta = rewards[t] + gamma * next_v - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}
