//! Actor-critic policy network and its PPO learner.

pub mod gae;
pub mod net;
pub mod ppo;
pub mod train;

pub use gae::gae;
pub use net::{Distribution, Head, InitScheme, LearnAction, NetSpec, PolicyError, PolicyParams, Sampled};
pub use ppo::{ppo_update, Learner, PpoConfig, RolloutBatch, UpdateStats};
pub use train::{collect, pretrain, train, Advice, Guidance, GuidanceCounters, IterationLog, NoGuidance, TrainConfig, TrainError, TrainOutcome};
