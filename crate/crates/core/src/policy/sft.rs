//! Supervised fine-tuning: maximum likelihood on (prompt, target) pairs.

use log::debug;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{accumulate_grad_logprob, logprob, PolicyError, PolicyParams};
use crate::optim::{clip_grad_norm, warmup_cosine, AdamConfig, AdamState};
use crate::tokenspace::TokenSequence;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub x: TokenSequence,
    pub y_target: TokenSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub warmup_frac: f64,
    pub clip: f64,
    pub adam: AdamConfig,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 8,
            lr: 1e-2,
            warmup_frac: 0.05,
            clip: 1.0,
            adam: AdamConfig {
                weight_decay: 1e-4,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftOutcome {
    pub params: PolicyParams,
    /// Mean pre-update batch loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mean negative log-likelihood of the batch and its exact gradient.
pub fn sft_loss_and_grad(params: &PolicyParams, batch: &[SftExample]) -> Result<(f64, PolicyParams), PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut grad = PolicyParams::zeros(*params.config());
    let mut loss = 0.0;
    for ex in batch {
        loss -= logprob(params, &ex.x, &ex.y_target)?;
        accumulate_grad_logprob(params, &ex.x, &ex.y_target, -1.0 / n, &mut grad)?;
    }
    Ok((loss / n, grad))
}

pub fn sft_train<R: Rng + ?Sized>(
    init: &PolicyParams,
    corpus: &[SftExample],
    cfg: &SftConfig,
    rng: &mut R,
) -> Result<SftOutcome, PolicyError> {
    if corpus.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let batch_size = cfg.batch_size.max(1);
    let batches_per_epoch = corpus.len().div_ceil(batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;

    let mut params = init.clone();
    let mut adam = AdamState::new(params.as_slice().len());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let batch: Vec<SftExample> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let (loss, mut grad) = sft_loss_and_grad(&params, &batch)?;
            if !loss.is_finite() {
                return Err(PolicyError::NonFinite(format!(
                    "SFT loss {loss} at epoch {epoch}, batch {b}"
                )));
            }
            epoch_loss += loss * batch.len() as f64;
            clip_grad_norm(grad.as_mut_slice(), cfg.clip);
            let lr = warmup_cosine(step, total_steps, cfg.warmup_frac, cfg.lr);
            adam.step(&cfg.adam, params.as_mut_slice(), grad.as_slice(), lr);
            step += 1;
        }
        let mean = epoch_loss / corpus.len() as f64;
        debug!("sft epoch {epoch}: mean loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(SftOutcome { params, epoch_losses })
}
