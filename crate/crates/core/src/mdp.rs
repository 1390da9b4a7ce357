//! Environment-agnostic MDP types: states, actions, transitions, trajectories.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Axis-aligned cell span `{min_x, max_x, min_y, max_y}`, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub min_x: i32,
    pub max_x: i32,
    pub min_y: i32,
    pub max_y: i32,
}

impl Span {
    pub const fn new(min_x: i32, max_x: i32, min_y: i32, max_y: i32) -> Self {
        Self { min_x, max_x, min_y, max_y }
    }

    pub const fn point(x: i32, y: i32) -> Self {
        Self::new(x, x, y, y)
    }

    pub fn overlaps_x(&self, other: &Span) -> bool {
        self.min_x <= other.max_x && other.min_x <= self.max_x
    }
}

/// Grid-world state: a list of entity spans plus auxiliary integers
/// (velocities, scores) inside `[0, width] x [0, height]`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridState {
    pub width: i32,
    pub height: i32,
    pub spans: Vec<Span>,
    pub aux: Vec<i32>,
}

impl GridState {
    pub fn validate(&self) -> Result<(), StateError> {
        for (i, s) in self.spans.iter().enumerate() {
            if s.min_x > s.max_x || s.min_y > s.max_y {
                return Err(StateError::InvertedSpan(i));
            }
            if s.min_x < 0 || s.max_x > self.width || s.min_y < 0 || s.max_y > self.height {
                return Err(StateError::OutOfBounds(i));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum State {
    Grid(GridState),
    Vector(Vec<f64>),
}

impl State {
    pub fn validate(&self, expected_dim: Option<usize>) -> Result<(), StateError> {
        match self {
            State::Grid(g) => g.validate(),
            State::Vector(v) => {
                if let Some(d) = expected_dim {
                    if v.len() != d {
                        return Err(StateError::Dimension { expected: d, got: v.len() });
                    }
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(StateError::NonFinite);
                }
                Ok(())
            }
        }
    }

    pub fn as_grid(&self) -> Option<&GridState> {
        match self {
            State::Grid(g) => Some(g),
            State::Vector(_) => None,
        }
    }

    pub fn as_vector(&self) -> Option<&[f64]> {
        match self {
            State::Vector(v) => Some(v),
            State::Grid(_) => None,
        }
    }

    /// Flat numeric form used by the trajectory file format: grid spans as
    /// `min_x, max_x, min_y, max_y` quadruples followed by the auxiliary integers.
    pub fn flatten(&self) -> Vec<f64> {
        match self {
            State::Grid(g) => g
                .spans
                .iter()
                .flat_map(|s| [s.min_x, s.max_x, s.min_y, s.max_y])
                .chain(g.aux.iter().copied())
                .map(f64::from)
                .collect(),
            State::Vector(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StateError {
    #[error("span {0} has min greater than max")]
    InvertedSpan(usize),
    #[error("span {0} lies outside the grid bounds")]
    OutOfBounds(usize),
    #[error("state dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("state contains a non-finite component")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Discrete { index: usize, arity: usize },
    Continuous(Vec<f64>),
}

impl Action {
    pub fn discrete(index: usize, arity: usize) -> Self {
        Action::Discrete { index, arity }
    }

    pub fn index(&self) -> Option<usize> {
        match self {
            Action::Discrete { index, .. } => Some(*index),
            Action::Continuous(_) => None,
        }
    }

    pub fn as_vector(&self) -> Option<&[f64]> {
        match self {
            Action::Continuous(v) => Some(v),
            Action::Discrete { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous { dim: usize, low: f64, high: f64 },
}

impl ActionSpace {
    /// Whether `action` has this space's kind and shape. Range is not checked
    /// for continuous actions; environments clamp those.
    pub fn accepts_kind(&self, action: &Action) -> bool {
        match (self, action) {
            (ActionSpace::Discrete(n), Action::Discrete { index, arity }) => arity == n && index < n,
            (ActionSpace::Continuous { dim, .. }, Action::Continuous(v)) => v.len() == *dim,
            _ => false,
        }
    }

    pub fn contains(&self, action: &Action) -> bool {
        match (self, action) {
            (ActionSpace::Continuous { dim, low, high }, Action::Continuous(v)) => {
                v.len() == *dim && v.iter().all(|x| x.is_finite() && *x >= *low && *x <= *high)
            }
            _ => self.accepts_kind(action),
        }
    }

    /// Number of outputs a policy head needs for this space.
    pub fn width(&self) -> usize {
        match self {
            ActionSpace::Discrete(n) => *n,
            ActionSpace::Continuous { dim, .. } => *dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    #[serde(rename = "pong")]
    Pong,
    #[serde(rename = "hopper-lite")]
    HopperLite,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Pong => "pong",
            EnvKind::HopperLite => "hopper-lite",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown environment {0:?}; expected \"pong\" or \"hopper-lite\"")]
pub struct UnknownEnv(pub String);

impl FromStr for EnvKind {
    type Err = UnknownEnv;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pong" => Ok(EnvKind::Pong),
            "hopper-lite" | "hopper_lite" => Ok(EnvKind::HopperLite),
            other => Err(UnknownEnv(other.into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalReason {
    Goal,
    Failure,
    StepLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: State,
    pub policy_action: Action,
    pub executed_action: Action,
    pub env_reward: f64,
    pub shaped_reward: f64,
    pub next_state: State,
    pub done: bool,
    pub timestep: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_id: u64,
    pub seed: u64,
    pub transitions: Vec<Transition>,
    pub terminal_reason: Option<TerminalReason>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TrajectoryError {
    #[error("transition timestep {got} does not follow trajectory length {expected}")]
    Ordering { expected: usize, got: usize },
    #[error("trajectory is closed; its last transition was terminal")]
    Closed,
}

impl Trajectory {
    pub fn new(episode_id: u64, seed: u64) -> Self {
        Self { episode_id, seed, transitions: Vec::new(), terminal_reason: None }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.terminal_reason.is_some()
    }

    /// Appends a transition; its timestep must equal the current length and
    /// nothing may follow a terminal transition.
    pub fn record(&mut self, transition: Transition) -> Result<(), TrajectoryError> {
        if self.transitions.last().is_some_and(|t| t.done) {
            return Err(TrajectoryError::Closed);
        }
        if transition.timestep != self.transitions.len() {
            return Err(TrajectoryError::Ordering {
                expected: self.transitions.len(),
                got: transition.timestep,
            });
        }
        self.transitions.push(transition);
        Ok(())
    }

    pub fn total_env_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.env_reward).sum()
    }

    pub fn total_shaped_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.shaped_reward).sum()
    }
}

/// `sum_t gamma^t * shaped_reward_t`; zero for an empty trajectory.
pub fn discounted_return(trajectory: &Trajectory, gamma: f64) -> f64 {
    let mut acc = 0.0;
    let mut discount = 1.0;
    for t in &trajectory.transitions {
        acc += discount * t.shaped_reward;
        discount *= gamma;
    }
    acc
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("action kind or shape does not match the environment's action space")]
    TypeMismatch,
    #[error("step called on a terminal environment")]
    TerminalMisuse,
    #[error("step called before reset")]
    NotReset,
}

/// Non-fatal conditions an environment reports alongside a step.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvWarning {
    ClampedAction { original: Vec<f64>, clamped: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: State,
    pub reward: f64,
    pub done: bool,
    pub reason: Option<TerminalReason>,
    pub warning: Option<EnvWarning>,
}

pub trait Environment {
    fn kind(&self) -> EnvKind;
    fn action_space(&self) -> ActionSpace;
    /// Length of the policy observation vector produced by [`Environment::observe`].
    fn observation_dim(&self) -> usize;
    fn reset(&mut self, seed: u64) -> State;
    fn step(&mut self, action: &Action) -> Result<Step, EnvError>;
    /// Policy input encoding of a state.
    fn observe(&self, state: &State) -> Vec<f64>;
    fn max_steps(&self) -> usize;
}
