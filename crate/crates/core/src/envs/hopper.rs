//! "hopper-lite": a smooth surrogate for a one-legged planar hopper.
//!
//! State layout (11 components):
//! `[torso_x, torso_height, pitch, vx, vz, pitch_vel, hip, hip_vel, knee, knee_vel, ankle]`.
//! Action: torques `[hip, knee, ankle]` in `[-1, 1]`.
//!
//! Update (semi-implicit Euler, step `dt`):
//!
//! ```text
//! hip_vel   += dt * (10 a_hip  - 2 hip_vel  - 5 hip)       hip   += dt * hip_vel
//! knee_vel  += dt * (10 a_knee - 2 knee_vel - 5 knee)      knee  += dt * knee_vel
//! ankle     += dt * (4 a_ankle - 2 ankle)
//! vx        += dt * (3 a_hip cos(pitch) + 0.5 hip_vel - 0.8 vx)
//! vz        += dt * (6 (rest - height) + 2 a_knee + 0.5 knee_vel - 1.5 vz - 3 (1 - cos(pitch)))
//! pitch_vel += dt * (1.5 sin(pitch) + 0.8 a_hip + 2 a_ankle + ankle - pitch_vel)
//! torso_x   += dt * vx;  height += dt * vz;  pitch += dt * pitch_vel
//! ```
//!
//! Pitch is open-loop unstable and hip thrust tips the torso forward, so
//! forward speed has to be traded against balance through the ankle.
//!
//! Reward is `vx + 1.0 - 0.001 * |a|^2`, using the horizontal velocity of the
//! state the action is taken in. The episode ends when the height drops below
//! 0.7, `|pitch| > 0.628`, any component is non-finite, or the step limit is hit.

use alloc::vec;
use alloc::vec::Vec;
use libm::{cos, sin};

use serde::{Deserialize, Serialize};

use crate::mdp::{Action, ActionSpace, EnvError, EnvKind, EnvWarning, Environment, State, Step, TerminalReason};
use crate::rng::{Purpose, RngStream};

pub const STATE_DIM: usize = 11;
pub const ACTION_DIM: usize = 3;
pub const MIN_HEIGHT: f64 = 0.7;
pub const MAX_PITCH: f64 = 0.628;
pub const ALIVE_BONUS: f64 = 1.0;
pub const CTRL_COST: f64 = 0.001;

pub mod idx {
    pub const X: usize = 0;
    pub const HEIGHT: usize = 1;
    pub const PITCH: usize = 2;
    pub const VX: usize = 3;
    pub const VZ: usize = 4;
    pub const PITCH_VEL: usize = 5;
    pub const HIP: usize = 6;
    pub const HIP_VEL: usize = 7;
    pub const KNEE: usize = 8;
    pub const KNEE_VEL: usize = 9;
    pub const ANKLE: usize = 10;
}

/// Field labels in state order, as rendered in prompts.
pub const FIELD_LABELS: [&str; STATE_DIM] = [
    "torso x",
    "torso height",
    "torso pitch",
    "horizontal velocity",
    "vertical velocity",
    "pitch velocity",
    "hip angle",
    "hip angular velocity",
    "knee angle",
    "knee angular velocity",
    "ankle angle",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HopperConfig {
    pub dt: f64,
    pub rest_height: f64,
    /// Half-width of the uniform noise added to the four angles at reset.
    pub reset_noise: f64,
    pub max_steps: usize,
}

impl Default for HopperConfig {
    fn default() -> Self {
        Self { dt: 0.05, rest_height: 1.25, reset_noise: 0.005, max_steps: 1000 }
    }
}

pub fn hopper_reward(state: &[f64], torque: &[f64]) -> f64 {
    let ctrl: f64 = torque.iter().map(|a| a * a).sum();
    state[idx::VX] + ALIVE_BONUS - CTRL_COST * ctrl
}

pub fn is_unhealthy(state: &[f64]) -> bool {
    state.iter().any(|x| !x.is_finite()) || state[idx::HEIGHT] < MIN_HEIGHT || state[idx::PITCH].abs() > MAX_PITCH
}

#[derive(Debug, Clone, PartialEq)]
pub struct HopperOutcome {
    pub state: Vec<f64>,
    pub reward: f64,
    pub unhealthy: bool,
    pub warning: Option<EnvWarning>,
}

/// One dynamics step. Out-of-range torques are clamped and reported.
pub fn hopper_lite_step(state: &[f64], torque: &[f64], config: &HopperConfig) -> HopperOutcome {
    let clamped: Vec<f64> = torque.iter().map(|a| if a.is_nan() { 0.0 } else { a.clamp(-1.0, 1.0) }).collect();
    let warning = (clamped.as_slice() != torque).then(|| EnvWarning::ClampedAction {
        original: torque.to_vec(),
        clamped: clamped.clone(),
    });
    let (a_hip, a_knee, a_ankle) = (clamped[0], clamped[1], clamped[2]);
    let dt = config.dt;
    let mut s = state.to_vec();
    let reward = hopper_reward(state, &clamped);

    s[idx::HIP_VEL] += dt * (10.0 * a_hip - 2.0 * s[idx::HIP_VEL] - 5.0 * s[idx::HIP]);
    s[idx::HIP] += dt * s[idx::HIP_VEL];
    s[idx::KNEE_VEL] += dt * (10.0 * a_knee - 2.0 * s[idx::KNEE_VEL] - 5.0 * s[idx::KNEE]);
    s[idx::KNEE] += dt * s[idx::KNEE_VEL];
    s[idx::ANKLE] += dt * (4.0 * a_ankle - 2.0 * s[idx::ANKLE]);

    let pitch = s[idx::PITCH];
    s[idx::VX] += dt * (3.0 * a_hip * cos(pitch) + 0.5 * s[idx::HIP_VEL] - 0.8 * s[idx::VX]);
    s[idx::VZ] += dt
        * (6.0 * (config.rest_height - s[idx::HEIGHT]) + 2.0 * a_knee + 0.5 * s[idx::KNEE_VEL]
            - 1.5 * s[idx::VZ]
            - 3.0 * (1.0 - cos(pitch)));
    s[idx::PITCH_VEL] +=
        dt * (1.5 * sin(pitch) + 0.8 * a_hip + 2.0 * a_ankle + s[idx::ANKLE] - s[idx::PITCH_VEL]);

    s[idx::X] += dt * s[idx::VX];
    s[idx::HEIGHT] += dt * s[idx::VZ];
    s[idx::PITCH] += dt * s[idx::PITCH_VEL];

    let unhealthy = is_unhealthy(&s);
    HopperOutcome { state: s, reward, unhealthy, warning }
}

#[derive(Debug, Clone)]
pub struct HopperLiteEnv {
    config: HopperConfig,
    state: Option<Vec<f64>>,
    steps: usize,
    done: bool,
}

impl HopperLiteEnv {
    pub fn new(config: HopperConfig) -> Self {
        Self { config, state: None, steps: 0, done: false }
    }

    pub fn config(&self) -> &HopperConfig {
        &self.config
    }

    pub fn rest_state(&self) -> Vec<f64> {
        let mut s = vec![0.0; STATE_DIM];
        s[idx::HEIGHT] = self.config.rest_height;
        s
    }

    pub fn set_state(&mut self, state: Vec<f64>) {
        self.state = Some(state);
        self.steps = 0;
        self.done = false;
    }
}

impl Environment for HopperLiteEnv {
    fn kind(&self) -> EnvKind {
        EnvKind::HopperLite
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous { dim: ACTION_DIM, low: -1.0, high: 1.0 }
    }

    fn observation_dim(&self) -> usize {
        STATE_DIM
    }

    fn reset(&mut self, seed: u64) -> State {
        let mut rng = RngStream::derive(seed, Purpose::Reset, 0);
        let mut s = self.rest_state();
        for i in [idx::PITCH, idx::HIP, idx::KNEE, idx::ANKLE] {
            s[i] = rng.uniform_range(-self.config.reset_noise, self.config.reset_noise);
        }
        self.state = Some(s.clone());
        self.steps = 0;
        self.done = false;
        State::Vector(s)
    }

    fn step(&mut self, action: &Action) -> Result<Step, EnvError> {
        if self.done {
            return Err(EnvError::TerminalMisuse);
        }
        let Some(state) = self.state.as_ref() else {
            return Err(EnvError::NotReset);
        };
        let torque = match action {
            Action::Continuous(v) if v.len() == ACTION_DIM => v,
            _ => return Err(EnvError::TypeMismatch),
        };
        let out = hopper_lite_step(state, torque, &self.config);
        self.steps += 1;
        let reason = if out.unhealthy {
            Some(TerminalReason::Failure)
        } else if self.steps >= self.config.max_steps {
            Some(TerminalReason::StepLimit)
        } else {
            None
        };
        self.done = reason.is_some();
        self.state = Some(out.state.clone());
        Ok(Step { state: State::Vector(out.state), reward: out.reward, done: self.done, reason, warning: out.warning })
    }

    /// Observation is the raw state with the torso x dropped in favour of a zero
    /// so that the policy does not depend on absolute position.
    fn observe(&self, state: &State) -> Vec<f64> {
        let mut v = state.as_vector().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; STATE_DIM]);
        if let Some(x) = v.get_mut(idx::X) {
            *x = 0.0;
        }
        v
    }

    fn max_steps(&self) -> usize {
        self.config.max_steps
    }
}
