//! Toolkit for reinforcement fine-tuning with verifiable rewards.
//!
//! The crate is organised bottom-up:
//!
//! - [`response`] parses tagged model output and extracts typed answers.
//! - [`reward`] scores responses: a strict format reward plus discrete,
//!   tolerance-based numeric, and tiered function-sequence accuracy rewards.
//! - [`policy`] is a tabular autoregressive policy with exact log-probabilities
//!   and closed-form gradients.
//! - [`grpo`] holds the two-stage trainer: supervised warm-up followed by
//!   group-relative policy optimisation against a frozen reference.
//! - [`envs`] generates symbolic counting, numeric-QA and scene-transformation
//!   tasks, and wraps them as training environments.
//! - [`cli`] implements the `rft` command-line harness.
//!
//! Data-parallel loops (group scoring, batch scoring, per-instance gradients)
//! go through [`par`], which uses rayon when the `parallel` feature is on and
//! falls back to plain iteration otherwise. Results are order-stable either way.

pub mod cli;
pub mod envs;
pub mod grpo;
pub mod par;
pub mod policy;
pub mod response;
pub mod reward;

pub use envs::transform::{StepValue, TransformFn, TransformStep};
pub use response::{ExtractedAnswer, ResponseTemplate, StructuredResponse};
pub use reward::{GroundTruthAnswer, RewardBreakdown, RewardConfig};
