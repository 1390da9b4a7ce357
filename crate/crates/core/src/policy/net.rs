//! Two-hidden-layer tanh actor-critic with explicit backpropagation.
//!
//! All parameters live in one flat `Vec<f64>`:
//! `w1 [h x obs], b1 [h], w2 [h x h], b2 [h], wp [out x h], bp [out], wv [h], bv [1]`
//! followed by `log_std [out]` for Gaussian heads. Matrices are row-major.

use alloc::vec;
use alloc::vec::Vec;
use libm::{exp, log, sqrt, tanh};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{Action, ActionSpace};
use crate::rng::RngStream;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Head {
    Categorical { actions: usize },
    Gaussian { dim: usize },
}

impl Head {
    pub fn for_space(space: &ActionSpace) -> Self {
        match space {
            ActionSpace::Discrete(n) => Head::Categorical { actions: *n },
            ActionSpace::Continuous { dim, .. } => Head::Gaussian { dim: *dim },
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Head::Categorical { actions } => *actions,
            Head::Gaussian { dim } => *dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub obs_dim: usize,
    pub hidden: usize,
    pub head: Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Orthogonal matrices scaled by a per-layer gain (sqrt 2 trunk, 0.01 policy head, 1 value head).
    Orthogonal,
    /// Gaussian entries scaled by `gain / sqrt(fan_in)` with the same gains.
    ScaledNormal,
    Zeros,
}

/// Named parameter block with its offset and shape in the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: &'static str,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wp: usize,
    bp: usize,
    wv: usize,
    bv: usize,
    log_std: usize,
    total: usize,
}

impl NetSpec {
    fn layout(&self) -> Layout {
        let (o, h, k) = (self.obs_dim, self.hidden, self.head.width());
        let w1 = 0;
        let b1 = w1 + h * o;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let wp = b2 + h;
        let bp = wp + k * h;
        let wv = bp + k;
        let bv = wv + h;
        let log_std = bv + 1;
        let total = match self.head {
            Head::Categorical { .. } => log_std,
            Head::Gaussian { dim } => log_std + dim,
        };
        Layout { w1, b1, w2, b2, wp, bp, wv, bv, log_std, total }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    pub fn blocks(&self) -> Vec<Block> {
        let l = self.layout();
        let (o, h, k) = (self.obs_dim, self.hidden, self.head.width());
        let mut out = vec![
            Block { name: "trunk.0.weight", offset: l.w1, rows: h, cols: o },
            Block { name: "trunk.0.bias", offset: l.b1, rows: h, cols: 1 },
            Block { name: "trunk.1.weight", offset: l.w2, rows: h, cols: h },
            Block { name: "trunk.1.bias", offset: l.b2, rows: h, cols: 1 },
            Block { name: "policy.weight", offset: l.wp, rows: k, cols: h },
            Block { name: "policy.bias", offset: l.bp, rows: k, cols: 1 },
            Block { name: "value.weight", offset: l.wv, rows: 1, cols: h },
            Block { name: "value.bias", offset: l.bv, rows: 1, cols: 1 },
        ];
        if let Head::Gaussian { dim } = self.head {
            out.push(Block { name: "log_std", offset: l.log_std, rows: dim, cols: 1 });
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("observation has {got} components, network expects {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("action does not match the policy head")]
    ActionMismatch,
    #[error("non-finite gradient in {block} (index {index}) at epoch {epoch}, minibatch {minibatch}")]
    NonFiniteGradient { block: &'static str, index: usize, epoch: usize, minibatch: usize },
    #[error("rollout batch is empty")]
    EmptyBatch,
    #[error("parameter vector has {got} entries, spec needs {expected}")]
    ParamCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub spec: NetSpec,
    pub data: Vec<f64>,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Vec<f64>,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Distribution {
    Categorical { logits: Vec<f64>, probs: Vec<f64> },
    Gaussian { mean: Vec<f64>, log_std: Vec<f64> },
}

/// Action in the form the learner scores it: a category index, or the
/// unclamped real vector whose density was evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LearnAction {
    Index(usize),
    Vector(Vec<f64>),
}

impl LearnAction {
    pub fn from_action(a: &Action) -> Self {
        match a {
            Action::Discrete { index, .. } => LearnAction::Index(*index),
            Action::Continuous(v) => LearnAction::Vector(v.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    /// Action passed to the environment (continuous components clamped to `[-1, 1]`).
    pub action: Action,
    pub learn: LearnAction,
    pub log_prob: f64,
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], b: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        out[r] = acc;
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| exp(z - m)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut RngStream) -> Vec<f64> {
    // Gram-Schmidt on the longer side of a Gaussian matrix.
    let (n, m) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    while basis.len() < m {
        let mut v: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= d * bi;
            }
        }
        let norm = sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut w = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            w[r * cols + c] = gain * if rows >= cols { basis[c][r] } else { basis[r][c] };
        }
    }
    w
}

impl PolicyParams {
    pub fn zeros(spec: NetSpec) -> Self {
        Self { spec, data: vec![0.0; spec.param_count()] }
    }

    pub fn init(spec: NetSpec, scheme: InitScheme, rng: &mut RngStream) -> Self {
        let mut p = Self::zeros(spec);
        if scheme == InitScheme::Zeros {
            return p;
        }
        let l = spec.layout();
        let (o, h, k) = (spec.obs_dim, spec.hidden, spec.head.width());
        let trunk_gain = sqrt(2.0);
        let mut fill = |offset: usize, rows: usize, cols: usize, gain: f64, rng: &mut RngStream| {
            let w = match scheme {
                InitScheme::Orthogonal => orthogonal(rows, cols, gain, rng),
                _ => {
                    let scale = gain / sqrt(cols as f64);
                    (0..rows * cols).map(|_| scale * rng.standard_normal()).collect()
                }
            };
            p.data[offset..offset + rows * cols].copy_from_slice(&w);
        };
        fill(l.w1, h, o, trunk_gain, rng);
        fill(l.w2, h, h, trunk_gain, rng);
        fill(l.wp, k, h, 0.01, rng);
        fill(l.wv, 1, h, 1.0, rng);
        p
    }

    pub fn check(&self) -> Result<(), PolicyError> {
        let expected = self.spec.param_count();
        if self.data.len() != expected {
            return Err(PolicyError::ParamCount { expected, got: self.data.len() });
        }
        Ok(())
    }

    pub fn forward_cached(&self, obs: &[f64]) -> Result<(Distribution, f64, ForwardCache), PolicyError> {
        let spec = self.spec;
        if obs.len() != spec.obs_dim {
            return Err(PolicyError::ShapeMismatch { expected: spec.obs_dim, got: obs.len() });
        }
        let l = spec.layout();
        let (o, h, k) = (spec.obs_dim, spec.hidden, spec.head.width());
        let d = &self.data;
        let mut h1 = vec![0.0; h];
        matvec(&d[l.w1..l.b1], h, o, obs, &d[l.b1..l.w2], &mut h1);
        h1.iter_mut().for_each(|x| *x = tanh(*x));
        let mut h2 = vec![0.0; h];
        matvec(&d[l.w2..l.b2], h, h, &h1, &d[l.b2..l.wp], &mut h2);
        h2.iter_mut().for_each(|x| *x = tanh(*x));
        let mut out = vec![0.0; k];
        matvec(&d[l.wp..l.bp], k, h, &h2, &d[l.bp..l.wv], &mut out);
        let mut v = [0.0];
        matvec(&d[l.wv..l.bv], 1, h, &h2, &d[l.bv..l.bv + 1], &mut v);
        let dist = match spec.head {
            Head::Categorical { .. } => {
                let probs = softmax(&out);
                Distribution::Categorical { logits: out, probs }
            }
            Head::Gaussian { dim } => {
                Distribution::Gaussian { mean: out, log_std: d[l.log_std..l.log_std + dim].to_vec() }
            }
        };
        Ok((dist, v[0], ForwardCache { input: obs.to_vec(), h1, h2 }))
    }

    /// Action distribution and value estimate for one observation.
    pub fn forward(&self, obs: &[f64]) -> Result<(Distribution, f64), PolicyError> {
        self.forward_cached(obs).map(|(d, v, _)| (d, v))
    }

    /// Accumulates into `grad` the gradient given upstream derivatives with
    /// respect to the head outputs (logits or mean), the value, and log-std.
    pub fn backward(&self, cache: &ForwardCache, d_head: &[f64], d_value: f64, d_log_std: &[f64], grad: &mut [f64]) {
        let spec = self.spec;
        let l = spec.layout();
        let (o, h, k) = (spec.obs_dim, spec.hidden, spec.head.width());
        let d = &self.data;

        let mut dh2 = vec![0.0; h];
        for r in 0..k {
            let g = d_head[r];
            if g == 0.0 {
                continue;
            }
            grad[l.bp + r] += g;
            let row = l.wp + r * h;
            for c in 0..h {
                grad[row + c] += g * cache.h2[c];
                dh2[c] += g * d[row + c];
            }
        }
        if d_value != 0.0 {
            grad[l.bv] += d_value;
            for c in 0..h {
                grad[l.wv + c] += d_value * cache.h2[c];
                dh2[c] += d_value * d[l.wv + c];
            }
        }
        if let Head::Gaussian { dim } = spec.head {
            for i in 0..dim {
                grad[l.log_std + i] += d_log_std[i];
            }
        }
        // through tanh
        let dz2: Vec<f64> = dh2.iter().zip(&cache.h2).map(|(g, a)| g * (1.0 - a * a)).collect();
        let mut dh1 = vec![0.0; h];
        for r in 0..h {
            let g = dz2[r];
            if g == 0.0 {
                continue;
            }
            grad[l.b2 + r] += g;
            let row = l.w2 + r * h;
            for c in 0..h {
                grad[row + c] += g * cache.h1[c];
                dh1[c] += g * d[row + c];
            }
        }
        for r in 0..h {
            let g = dh1[r] * (1.0 - cache.h1[r] * cache.h1[r]);
            if g == 0.0 {
                continue;
            }
            grad[l.b1 + r] += g;
            let row = l.w1 + r * o;
            for c in 0..o {
                grad[row + c] += g * cache.input[c];
            }
        }
    }

    /// Name of the block holding flat index `i`.
    pub fn block_name(&self, i: usize) -> &'static str {
        self.spec.blocks().iter().find(|b| b.range().contains(&i)).map(|b| b.name).unwrap_or("?")
    }
}

impl Distribution {
    pub fn log_prob(&self, action: &LearnAction) -> Result<f64, PolicyError> {
        match (self, action) {
            (Distribution::Categorical { probs, logits }, LearnAction::Index(i)) => {
                if *i >= probs.len() {
                    return Err(PolicyError::ActionMismatch);
                }
                // log-softmax computed from logits for accuracy at small probabilities
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + log(logits.iter().map(|z| exp(z - m)).sum::<f64>());
                Ok(logits[*i] - lse)
            }
            (Distribution::Gaussian { mean, log_std }, LearnAction::Vector(a)) => {
                if a.len() != mean.len() {
                    return Err(PolicyError::ActionMismatch);
                }
                Ok(mean
                    .iter()
                    .zip(log_std)
                    .zip(a)
                    .map(|((mu, ls), x)| {
                        let z = (x - mu) / exp(*ls);
                        -0.5 * z * z - ls - 0.5 * LN_2PI
                    })
                    .sum())
            }
            _ => Err(PolicyError::ActionMismatch),
        }
    }

    pub fn entropy(&self) -> f64 {
        match self {
            Distribution::Categorical { probs, .. } => {
                -probs.iter().filter(|p| **p > 0.0).map(|p| p * log(*p)).sum::<f64>()
            }
            Distribution::Gaussian { log_std, .. } => log_std.iter().map(|ls| ls + 0.5 * (LN_2PI + 1.0)).sum(),
        }
    }

    /// Draws an action. Categorical: inverse-CDF on one uniform. Gaussian:
    /// `mean + std * z` with one standard-normal draw per component.
    pub fn sample(&self, rng: &mut RngStream) -> Sampled {
        match self {
            Distribution::Categorical { probs, .. } => {
                let u = rng.uniform();
                let mut acc = 0.0;
                let mut idx = probs.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        idx = i;
                        break;
                    }
                }
                // Never pick a zero-probability tail category through rounding.
                while probs[idx] == 0.0 && idx > 0 {
                    idx -= 1;
                }
                let learn = LearnAction::Index(idx);
                let log_prob = self.log_prob(&learn).unwrap_or(f64::NEG_INFINITY);
                Sampled { action: Action::discrete(idx, probs.len()), learn, log_prob }
            }
            Distribution::Gaussian { mean, log_std } => {
                let raw: Vec<f64> = mean.iter().zip(log_std).map(|(m, ls)| m + exp(*ls) * rng.standard_normal()).collect();
                let learn = LearnAction::Vector(raw.clone());
                let log_prob = self.log_prob(&learn).unwrap_or(f64::NEG_INFINITY);
                let clamped = raw.iter().map(|x| x.clamp(-1.0, 1.0)).collect();
                Sampled { action: Action::Continuous(clamped), learn, log_prob }
            }
        }
    }

    /// Most likely action: argmax (lowest index on ties) or the clamped mean.
    pub fn mode(&self) -> Action {
        match self {
            Distribution::Categorical { probs, .. } => {
                let mut best = 0;
                for (i, p) in probs.iter().enumerate() {
                    if *p > probs[best] {
                        best = i;
                    }
                }
                Action::discrete(best, probs.len())
            }
            Distribution::Gaussian { mean, .. } => Action::Continuous(mean.iter().map(|x| x.clamp(-1.0, 1.0)).collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cat_spec() -> NetSpec {
        NetSpec { obs_dim: 6, hidden: 8, head: Head::Categorical { actions: 3 } }
    }

    #[test]
    fn zero_params_uniform_categorical() {
        let p = PolicyParams::zeros(cat_spec());
        let (d, v) = p.forward(&[0.3; 6]).unwrap();
        match d {
            Distribution::Categorical { probs, .. } => {
                for q in probs {
                    assert!((q - 1.0 / 3.0).abs() < 1e-15);
                }
            }
            _ => panic!(),
        }
        assert_eq!(v, 0.0);
    }

    #[test]
    fn zero_params_standard_gaussian() {
        let spec = NetSpec { obs_dim: 11, hidden: 8, head: Head::Gaussian { dim: 3 } };
        let p = PolicyParams::zeros(spec);
        let (d, _) = p.forward(&[0.1; 11]).unwrap();
        match d {
            Distribution::Gaussian { mean, log_std } => {
                assert_eq!(mean, vec![0.0; 3]);
                assert!(log_std.iter().all(|l| exp(*l) == 1.0));
            }
            _ => panic!(),
        }
    }

    #[test]
    fn shape_mismatch() {
        let p = PolicyParams::zeros(cat_spec());
        assert_eq!(p.forward(&[0.0; 5]).unwrap_err(), PolicyError::ShapeMismatch { expected: 6, got: 5 });
    }

    #[test]
    fn probabilities_normalized_for_random_nets() {
        let mut rng = RngStream::new(3);
        for _ in 0..50 {
            let p = PolicyParams::init(cat_spec(), InitScheme::ScaledNormal, &mut rng);
            let mut p = p;
            p.data.iter_mut().for_each(|x| *x *= 5.0);
            let obs: Vec<f64> = (0..6).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            if let (Distribution::Categorical { probs, .. }, _) = p.forward(&obs).unwrap() {
                assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_categorical_sample() {
        let d = Distribution::Categorical { logits: vec![0.0, -1e300, -1e300], probs: vec![1.0, 0.0, 0.0] };
        let mut rng = RngStream::new(1);
        for _ in 0..100 {
            let s = d.sample(&mut rng);
            assert_eq!(s.learn, LearnAction::Index(0));
            assert_eq!(s.log_prob, 0.0);
        }
    }

    #[test]
    fn gaussian_reparameterization() {
        let d = Distribution::Gaussian { mean: vec![0.2, -0.1], log_std: vec![log(0.3), log(0.05)] };
        let mut a = RngStream::new(9);
        let mut b = RngStream::new(9);
        let s = d.sample(&mut a);
        let z0 = b.standard_normal();
        let z1 = b.standard_normal();
        let LearnAction::Vector(x) = s.learn else { panic!("expected vector") };
        assert!((x[0] - (0.2 + 0.3 * z0)).abs() < 1e-12);
        assert!((x[1] - (-0.1 + 0.05 * z1)).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_columns() {
        let mut rng = RngStream::new(5);
        let w = orthogonal(8, 4, 1.0, &mut rng);
        for i in 0..4 {
            for j in 0..4 {
                let d: f64 = (0..8).map(|r| w[r * 4 + i] * w[r * 4 + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn layout_blocks_tile_the_vector() {
        for head in [Head::Categorical { actions: 3 }, Head::Gaussian { dim: 3 }] {
            let spec = NetSpec { obs_dim: 5, hidden: 7, head };
            let mut next = 0;
            for b in spec.blocks() {
                assert_eq!(b.offset, next);
                next += b.len();
            }
            assert_eq!(next, spec.param_count());
        }
    }
}
