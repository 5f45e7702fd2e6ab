//! Group relative policy optimisation.
//!
//! Each step samples `G` rewrites per query from the frozen sampling policy,
//! scores them, and uses the group-mean baseline as the advantage. The loss
//! is the negated clipped importance-weighted surrogate plus a `beta`-weighted
//! KL divergence from a reference policy.

mod train;

pub use train::{train, write_checkpoint, RngState, Sidecar, StepLog, TrainOptions, TrainOutcome, TrainState};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalproto::{ProtocolError, ScoreRequest, Scorer};
use crate::exec::Executor;
use crate::optim::AdamConfig;
use crate::policy::{self, PolicyError, PolicyParams};
use crate::reward::{RewardError, RewardScore, WeightPair};
use crate::seed;
use crate::tokenspace::TokenSequence;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("invalid GRPO config: {0}")]
    InvalidConfig(String),
    #[error("advantages need at least 2 rewards, got {0}")]
    TooFewRewards(usize),
    #[error("importance ratio must be positive, got {0}")]
    NonPositiveRatio(f64),
    #[error("non-finite {what} at group {group}, candidate {candidate}")]
    NonFinite {
        what: &'static str,
        group: usize,
        candidate: usize,
    },
    #[error("scoring failed at step {step}: {source}")]
    Scoring { step: usize, source: ProtocolError },
    #[error("training aborted at step {step}: {reason}; checkpoint: {checkpoint:?}")]
    Aborted {
        step: usize,
        reason: String,
        checkpoint: Option<std::path::PathBuf>,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefMode {
    /// KL anchor is the policy at the start of RL.
    SftInit,
    /// KL anchor is the sampling policy of the current step.
    OldPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageNorm {
    MeanOnly,
    MeanStd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub batch_size: usize,
    pub epsilon: f64,
    pub beta: f64,
    pub total_steps: usize,
    /// Peak learning rate, decayed linearly to zero over `total_steps`.
    pub lr: f64,
    pub max_grad_norm: f64,
    pub ref_mode: RefMode,
    pub advantage_norm: AdvantageNorm,
    /// Gradient updates per rollout batch.
    pub inner_epochs: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub adam: AdamConfig,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl GrpoConfig {
    /// Values used for the full-size model: G = 4, 250 steps at lr 1e-6,
    /// beta = 0.01, gradient norm clipped at 20.
    pub fn full_scale() -> Self {
        Self {
            group_size: 4,
            batch_size: 8,
            epsilon: 0.2,
            beta: 0.01,
            total_steps: 250,
            lr: 1e-6,
            max_grad_norm: 20.0,
            ref_mode: RefMode::SftInit,
            advantage_norm: AdvantageNorm::MeanOnly,
            inner_epochs: 1,
            temperature: 1.0,
            top_p: 1.0,
            adam: AdamConfig::default(),
        }
    }

    /// Desk-scale overrides of [`GrpoConfig::full_scale`]: B = 8, lr = 5e-3, T = 400.
    pub fn desk() -> Self {
        Self {
            batch_size: 8,
            lr: 5e-3,
            total_steps: 400,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and >= 0");
        }
        if self.total_steps == 0 {
            return bad("total_steps must be >= 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and >= 0");
        }
        if self.max_grad_norm.is_nan() || self.max_grad_norm <= 0.0 {
            return bad("max_grad_norm must be positive");
        }
        if self.inner_epochs == 0 {
            return bad("inner_epochs must be >= 1");
        }
        Ok(())
    }
}

/// Group-relative advantages.
///
/// `MeanOnly` returns `r_i - mean(r)`; the last entry is set to minus the
/// running sum of the others so the advantages sum to exactly zero in
/// floating point. `MeanStd` divides by the population standard deviation
/// plus 1e-8.
pub fn compute_advantages(rewards: &[f64], mode: AdvantageNorm) -> Result<Vec<f64>, GrpoError> {
    let g = rewards.len();
    if g < 2 {
        return Err(GrpoError::TooFewRewards(g));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let mut adv: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    match mode {
        AdvantageNorm::MeanOnly => {
            let head: f64 = adv[..g - 1].iter().sum();
            adv[g - 1] = -head;
        }
        AdvantageNorm::MeanStd => {
            let var = adv.iter().map(|a| a * a).sum::<f64>() / g as f64;
            let denom = var.sqrt() + 1e-8;
            adv.iter_mut().for_each(|a| *a /= denom);
        }
    }
    Ok(adv)
}

/// `min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)`.
pub fn clipped_term(ratio: f64, advantage: f64, epsilon: f64) -> Result<f64, GrpoError> {
    if ratio.is_nan() || ratio <= 0.0 {
        return Err(GrpoError::NonPositiveRatio(ratio));
    }
    let (unclipped, clipped) = clip_branches(ratio, advantage, epsilon);
    Ok(unclipped.min(clipped))
}

fn clip_branches(ratio: f64, advantage: f64, epsilon: f64) -> (f64, f64) {
    (ratio * advantage, ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage)
}

/// `KL(reference || params)` over length-`max_len` rewrites of `x`, exact.
/// Per-position independence reduces it to a sum of categorical KLs.
pub fn kl_penalty(params: &PolicyParams, reference: &PolicyParams, x: &TokenSequence) -> Result<f64, GrpoError> {
    params.check_same_shape(reference)?;
    let l = params.config().max_len;
    let lp = policy::position_log_probs(params, x, l)?;
    let lr = policy::position_log_probs(reference, x, l)?;
    Ok(lp
        .iter()
        .zip(&lr)
        .map(|(p_row, r_row)| {
            r_row
                .iter()
                .zip(p_row)
                .map(|(&lr, &lp)| {
                    let q = lr.exp();
                    if q == 0.0 {
                        0.0
                    } else {
                        q * (lr - lp)
                    }
                })
                .sum::<f64>()
        })
        .sum())
}

/// Adds `scale * d KL(reference || params) / d params` to `grad`.
pub fn accumulate_kl_grad(
    params: &PolicyParams,
    reference: &PolicyParams,
    x: &TokenSequence,
    scale: f64,
    grad: &mut PolicyParams,
) -> Result<(), GrpoError> {
    params.check_same_shape(reference)?;
    let l = params.config().max_len;
    let lp = policy::position_log_probs(params, x, l)?;
    let lr = policy::position_log_probs(reference, x, l)?;
    let logit_grads: Vec<Vec<f64>> = lp
        .iter()
        .zip(&lr)
        .map(|(p_row, r_row)| p_row.iter().zip(r_row).map(|(p, r)| p.exp() - r.exp()).collect())
        .collect();
    policy::accumulate_logit_grads(params, x, &logit_grads, scale, grad)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRollout {
    pub query: TokenSequence,
    pub candidates: Vec<TokenSequence>,
    pub scores: Vec<RewardScore>,
    /// Scalarised rewards.
    pub rewards: Vec<f64>,
    pub old_logprobs: Vec<f64>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Mean clipped surrogate over all candidates (before negation).
    pub surrogate: f64,
    /// Mean KL over queries.
    pub kl: f64,
    pub grad: PolicyParams,
}

/// Loss and exact gradient:
/// `-(1/(B G)) sum_j sum_i clipped_term(w_ij, A_ij) + beta * mean_j KL_j`,
/// with `w_ij = exp(logprob(params) - old_logprob)`.
pub fn grpo_loss_and_grad(
    params: &PolicyParams,
    reference: &PolicyParams,
    groups: &[GroupRollout],
    config: &GrpoConfig,
    exec: &Executor,
) -> Result<LossOutput, GrpoError> {
    params.check_same_shape(reference)?;
    let b = groups.len();
    if b == 0 {
        return Err(GrpoError::InvalidConfig("no rollout groups".into()));
    }
    let n_total: usize = groups.iter().map(|g| g.candidates.len()).sum();
    let cand_scale = -1.0 / n_total as f64;
    let kl_scale = config.beta / b as f64;

    let per_group = exec.map_range(b, |j| -> Result<(f64, f64, PolicyParams), GrpoError> {
        let grp = &groups[j];
        let mut grad = PolicyParams::zeros(*params.config());
        let mut surrogate = 0.0;
        for (i, y) in grp.candidates.iter().enumerate() {
            let nf = |what| GrpoError::NonFinite {
                what,
                group: j,
                candidate: i,
            };
            let lp = policy::logprob(params, &grp.query, y)?;
            if !lp.is_finite() {
                return Err(nf("log-probability"));
            }
            let ratio = (lp - grp.old_logprobs[i]).exp();
            if !ratio.is_finite() || ratio <= 0.0 {
                return Err(nf("importance ratio"));
            }
            let adv = grp.advantages[i];
            let (unclipped, clipped) = clip_branches(ratio, adv, config.epsilon);
            let term = unclipped.min(clipped);
            if !term.is_finite() {
                return Err(nf("clipped term"));
            }
            surrogate += term;
            // The clipped branch is constant in params; only the ratio branch
            // carries gradient.
            if unclipped <= clipped && adv != 0.0 {
                policy::accumulate_grad_logprob(params, &grp.query, y, cand_scale * adv * ratio, &mut grad)?;
            }
        }
        let kl = kl_penalty(params, reference, &grp.query)?;
        if !kl.is_finite() {
            return Err(GrpoError::NonFinite {
                what: "KL",
                group: j,
                candidate: 0,
            });
        }
        if config.beta > 0.0 {
            accumulate_kl_grad(params, reference, &grp.query, kl_scale, &mut grad)?;
        }
        Ok((surrogate, kl, grad))
    });

    let mut grad = PolicyParams::zeros(*params.config());
    let (mut surrogate, mut kl) = (0.0, 0.0);
    for r in per_group {
        let (s, k, g) = r?;
        surrogate += s;
        kl += k;
        grad.add_scaled(&g, 1.0);
    }
    let surrogate = surrogate / n_total as f64;
    let kl = kl / b as f64;
    let loss = -surrogate + config.beta * kl;
    Ok(LossOutput {
        loss,
        surrogate,
        kl,
        grad,
    })
}

/// Request id for candidate `g` of query `b` at `step`.
pub fn request_id(master_seed: u64, step: usize, b: usize, g: usize) -> u64 {
    seed::mix(master_seed, &[seed::stage::REQUEST_ID, step as u64, b as u64, g as u64])
}

/// Samples `G` candidates per query from `old_params`, scores them and
/// computes advantages of the scalarised reward under `weights`.
///
/// Candidate `(b, g)` at `step` draws from its own random stream, so the
/// result does not depend on the executor.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    old_params: &PolicyParams,
    queries: &[TokenSequence],
    scorer: &dyn Scorer,
    weights: WeightPair,
    step: usize,
    master_seed: u64,
    config: &GrpoConfig,
    exec: &Executor,
) -> Result<Vec<GroupRollout>, GrpoError> {
    let g = config.group_size;
    let sampled = exec.map_range(queries.len() * g, |k| -> Result<(TokenSequence, f64), PolicyError> {
        let (b, i) = (k / g, k % g);
        let mut rng = seed::stream(master_seed, &[seed::stage::CANDIDATE, step as u64, b as u64, i as u64]);
        let y = policy::sample(old_params, &queries[b], &mut rng, config.temperature, config.top_p)?;
        let lp = policy::logprob(old_params, &queries[b], &y)?;
        Ok((y, lp))
    });
    let sampled: Vec<(TokenSequence, f64)> = sampled.into_iter().collect::<Result<_, _>>()?;
    let requests: Vec<ScoreRequest> = sampled
        .iter()
        .enumerate()
        .map(|(k, (y, _))| ScoreRequest {
            id: request_id(master_seed, step, k / g, k % g),
            original: queries[k / g].tokens().to_vec(),
            rewritten: y.tokens().to_vec(),
            step: step as u64,
        })
        .collect();
    let scores = scorer
        .score_batch(&requests)
        .map_err(|source| GrpoError::Scoring { step, source })?;
    if scores.len() != requests.len() {
        return Err(GrpoError::Scoring {
            step,
            source: ProtocolError::ConnectionLost(format!(
                "scorer returned {} scores for {} requests",
                scores.len(),
                requests.len()
            )),
        });
    }
    let mut out = Vec::with_capacity(queries.len());
    let mut it = sampled.into_iter().zip(scores);
    for q in queries {
        let (mut candidates, mut group_scores, mut old_logprobs) = (Vec::new(), Vec::new(), Vec::new());
        for ((y, lp), s) in it.by_ref().take(g) {
            candidates.push(y);
            group_scores.push(s);
            old_logprobs.push(lp);
        }
        let rewards: Vec<f64> = group_scores.iter().map(|s| weights.composite(s)).collect();
        let advantages = compute_advantages(&rewards, config.advantage_norm)?;
        out.push(GroupRollout {
            query: q.clone(),
            candidates,
            scores: group_scores,
            rewards,
            old_logprobs,
            advantages,
        });
    }
    Ok(out)
}
