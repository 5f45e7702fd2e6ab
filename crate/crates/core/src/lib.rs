//! Two-stage prompt-rewriting trainer: supervised fine-tuning followed by
//! group relative policy optimisation under a time-varying two-objective
//! reward, on a synthetic environment where semantic adherence and physical
//! plausibility conflict.
//!
//! Module map:
//! - [`tokenspace`]: vocabulary, token sequences, scenarios
//! - [`policy`]: rewrite policy, exact log-probabilities and gradients, SFT
//! - [`reward`]: Likert scores, reward curriculum, evaluation metrics
//! - [`grpo`]: advantages, clipped surrogate, KL penalty, RL loop
//! - [`synthenv`]: synthetic scorer and brute-force oracle
//! - [`evalproto`]: newline-delimited JSON scoring protocol
//! - [`harness`]: experiment runner, ablation and reports

pub mod evalproto;
pub mod exec;
pub mod grpo;
pub mod harness;
pub mod optim;
pub mod policy;
pub mod reward;
pub mod seed;
pub mod synthenv;
pub mod tokenspace;

#[cfg(test)]
pub(crate) mod testutil;

pub use exec::Executor;
