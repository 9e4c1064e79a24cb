//! Multi-reward group-relative policy optimization for structured
//! human-object interaction prediction.
//!
//! - [`types`]: boxes, triplets, outputs, weights and rollout samples
//! - [`grammar`]: the `<think>`/`<answer>` output format
//! - [`reward`]: format, detection, interaction and CoT rewards
//! - [`judge`]: step and group scoring of reasoning traces
//! - [`grpo`]: the clipped group-relative objective, its gradient and the training loop
//! - [`toy_env`]: an enumerable synthetic world and template policy
//! - [`metrics`]: H-mIOU, O-mIOU, A-ACC and success-rate evaluation
//! - [`config`], [`dataset`], [`commands`]: run configuration, JSONL I/O and the CLI commands

pub mod commands;
pub mod config;
pub mod dataset;
pub mod grammar;
pub mod grpo;
pub mod judge;
pub mod metrics;
pub mod reward;
pub mod toy_env;
pub mod types;

pub use types::*;
