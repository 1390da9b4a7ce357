//! Built-in environments and the state-interpretation templates.

pub mod describe;
pub mod hopper;
pub mod pong;

use alloc::boxed::Box;

pub use describe::{describe_state, StateDescription};
pub use hopper::{HopperConfig, HopperLiteEnv};
pub use pong::{PongAction, PongConfig, PongEnv, PongState};

use crate::mdp::{EnvKind, Environment};

/// Builds a boxed environment by kind.
pub fn make_env(kind: EnvKind, pong: &PongConfig, hopper: &HopperConfig) -> Box<dyn Environment + Send> {
    match kind {
        EnvKind::Pong => Box::new(PongEnv::new(pong.clone())),
        EnvKind::HopperLite => Box::new(HopperLiteEnv::new(hopper.clone())),
    }
}
