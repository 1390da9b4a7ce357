//! Pipeline driver for advisor-guided policy refinement.
//!
//! Reads a TOML [`config::RunConfig`], runs the stages
//! pretrain → rollout → identify → analyze → refine → eval → report against
//! artifacts on disk, and talks to either the scripted oracle or a
//! chat-completions endpoint. The `refine` binary is a thin wrapper over
//! [`pipeline::run_pipeline`].

pub mod cache;
pub mod config;
pub mod formats;
pub mod http;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;
pub use pipeline::{run_pipeline, PipelineError, Stage};
