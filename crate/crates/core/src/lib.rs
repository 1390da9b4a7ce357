//! Advisor-guided refinement of reinforcement-learning policies.
//!
//! This crate is `no_std` (with `alloc`) and carries no IO: environments,
//! the actor-critic network and its PPO update, prompt construction and
//! response grammar, the scripted oracle advisor, lookup-table refinement and
//! evaluation statistics. File formats, HTTP and the CLI live in the
//! companion `refine-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]
extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod advisor;
pub mod envs;
pub mod eval;
pub mod mdp;
pub mod policy;
pub mod refine;
pub mod rng;

pub use mdp::{Action, ActionSpace, EnvKind, Environment, State, TerminalReason, Trajectory, Transition};
pub use rng::{Purpose, RngStream};
