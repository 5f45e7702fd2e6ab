//! Autoregressive rewrite policy with exact log-probabilities.
//!
//! The context is a bag-of-tokens mean over the query. At position `t` the
//! logits are `(ctx + pos_embed[t]) * output_proj + output_bias`. The logits
//! do not depend on the already-emitted prefix, so the per-position
//! distributions are independent given the query; sequence probabilities,
//! KL divergences and their gradients are therefore available in closed
//! form.

mod checkpoint;
mod sft;

pub use checkpoint::{PolicyCheckpoint, CHECKPOINT_VERSION};
pub use sft::{sft_loss_and_grad, sft_train, SftConfig, SftExample, SftOutcome};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenspace::TokenSequence;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("policy config fields must be >= 1: {0:?}")]
    InvalidConfig(PolicyConfig),
    #[error("token {token} out of range for vocabulary of size {size}")]
    TokenOutOfRange { token: u32, size: usize },
    #[error("sequence length {len} exceeds policy length {max}")]
    TooLong { len: usize, max: usize },
    #[error("position {position} out of range (max_len {max})")]
    PositionOutOfRange { position: usize, max: usize },
    #[error("invalid sampling settings: temperature={temperature}, top_p={top_p}")]
    InvalidSampling { temperature: f64, top_p: f64 },
    #[error("parameter shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(PolicyConfig, PolicyConfig),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub dim: usize,
}

impl PolicyConfig {
    pub fn new(vocab_size: usize, max_len: usize, dim: usize) -> Result<Self, PolicyError> {
        let cfg = Self {
            vocab_size,
            max_len,
            dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.vocab_size == 0 || self.max_len == 0 || self.dim == 0 {
            return Err(PolicyError::InvalidConfig(*self));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        let (v, l, d) = (self.vocab_size, self.max_len, self.dim);
        v * d + l * d + d * v + v
    }
}

/// Policy parameters in one flat buffer. The same type carries gradients.
///
/// Layout, all row-major: `input_embed [V x d]`, `pos_embed [L x d]`,
/// `output_proj [d x V]`, `output_bias [V]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    config: PolicyConfig,
    data: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(config: PolicyConfig) -> Self {
        Self {
            config,
            data: vec![0.0; config.n_params()],
        }
    }

    /// Entries drawn i.i.d. from `N(0, scale^2)`.
    pub fn random<R: Rng + ?Sized>(config: PolicyConfig, scale: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, scale).expect("scale must be finite and non-negative");
        let data = (0..config.n_params()).map(|_| normal.sample(rng)).collect();
        Self { config, data }
    }

    pub fn from_parts(
        config: PolicyConfig,
        input_embed: &[f64],
        pos_embed: &[f64],
        output_proj: &[f64],
        output_bias: &[f64],
    ) -> Result<Self, PolicyError> {
        let (v, l, d) = (config.vocab_size, config.max_len, config.dim);
        if input_embed.len() != v * d
            || pos_embed.len() != l * d
            || output_proj.len() != d * v
            || output_bias.len() != v
        {
            return Err(PolicyError::Checkpoint("array lengths do not match config".into()));
        }
        let mut data = Vec::with_capacity(config.n_params());
        data.extend_from_slice(input_embed);
        data.extend_from_slice(pos_embed);
        data.extend_from_slice(output_proj);
        data.extend_from_slice(output_bias);
        Ok(Self { config, data })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn offsets(&self) -> [usize; 4] {
        let (v, l, d) = (self.config.vocab_size, self.config.max_len, self.config.dim);
        let a = v * d;
        let b = a + l * d;
        let c = b + d * v;
        [0, a, b, c]
    }

    pub fn input_embed(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o[0]..o[1]]
    }

    pub fn pos_embed(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o[1]..o[2]]
    }

    pub fn output_proj(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o[2]..o[3]]
    }

    pub fn output_bias(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o[3]..]
    }

    pub fn input_embed_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.data[o[0]..o[1]]
    }

    pub fn pos_embed_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.data[o[1]..o[2]]
    }

    pub fn output_proj_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.data[o[2]..o[3]]
    }

    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.data[o[3]..]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<(), PolicyError> {
        if self.config != other.config {
            return Err(PolicyError::ShapeMismatch(self.config, other.config));
        }
        Ok(())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        assert_eq!(self.config, other.config);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn check_tokens(&self, seq: &[u32]) -> Result<(), PolicyError> {
        let size = self.config.vocab_size;
        match seq.iter().find(|&&t| t as usize >= size) {
            Some(&token) => Err(PolicyError::TokenOutOfRange { token, size }),
            None => Ok(()),
        }
    }

    fn check_rewrite(&self, y: &[u32]) -> Result<(), PolicyError> {
        if y.len() > self.config.max_len {
            return Err(PolicyError::TooLong {
                len: y.len(),
                max: self.config.max_len,
            });
        }
        self.check_tokens(y)
    }
}

/// Mean of the `input_embed` rows of the tokens in `x`, with multiplicity.
pub fn context_encode(params: &PolicyParams, x: &TokenSequence) -> Result<Vec<f64>, PolicyError> {
    params.check_tokens(x.tokens())?;
    let d = params.config.dim;
    let mut ctx = vec![0.0; d];
    if x.is_empty() {
        return Ok(ctx);
    }
    let embed = params.input_embed();
    for &t in x.tokens() {
        let row = &embed[t as usize * d..(t as usize + 1) * d];
        ctx.iter_mut().zip(row).for_each(|(c, r)| *c += r);
    }
    let n = x.len() as f64;
    ctx.iter_mut().for_each(|c| *c /= n);
    Ok(ctx)
}

fn hidden(params: &PolicyParams, ctx: &[f64], position: usize) -> Vec<f64> {
    let d = params.config.dim;
    let pos = &params.pos_embed()[position * d..(position + 1) * d];
    ctx.iter().zip(pos).map(|(c, p)| c + p).collect()
}

fn project(params: &PolicyParams, h: &[f64]) -> Vec<f64> {
    let v = params.config.vocab_size;
    let proj = params.output_proj();
    let mut logits = params.output_bias().to_vec();
    for (j, &hj) in h.iter().enumerate() {
        let row = &proj[j * v..(j + 1) * v];
        logits.iter_mut().zip(row).for_each(|(l, w)| *l += hj * w);
    }
    logits
}

pub fn step_logits(params: &PolicyParams, ctx: &[f64], position: usize) -> Result<Vec<f64>, PolicyError> {
    if position >= params.config.max_len {
        return Err(PolicyError::PositionOutOfRange {
            position,
            max: params.config.max_len,
        });
    }
    Ok(project(params, &hidden(params, ctx, position)))
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Per-position log-distributions for the first `n` positions.
pub fn position_log_probs(params: &PolicyParams, x: &TokenSequence, n: usize) -> Result<Vec<Vec<f64>>, PolicyError> {
    if n > params.config.max_len {
        return Err(PolicyError::TooLong {
            len: n,
            max: params.config.max_len,
        });
    }
    let ctx = context_encode(params, x)?;
    Ok((0..n)
        .map(|t| log_softmax(&project(params, &hidden(params, &ctx, t))))
        .collect())
}

/// `log pi(y | x)`; zero for an empty rewrite.
pub fn logprob(params: &PolicyParams, x: &TokenSequence, y: &TokenSequence) -> Result<f64, PolicyError> {
    params.check_rewrite(y.tokens())?;
    let lp = position_log_probs(params, x, y.len())?;
    Ok(y.tokens().iter().zip(&lp).map(|(&tok, row)| row[tok as usize]).sum())
}

/// Samples exactly `max_len` tokens. Temperature zero is greedy decoding with
/// the lowest token id winning ties; otherwise logits are divided by the
/// temperature and a nucleus of mass `top_p` is kept and renormalised.
pub fn sample<R: Rng + ?Sized>(
    params: &PolicyParams,
    x: &TokenSequence,
    rng: &mut R,
    temperature: f64,
    top_p: f64,
) -> Result<TokenSequence, PolicyError> {
    sample_with(params, x, temperature, top_p, || rng.random::<f64>())
}

/// Greedy decoding.
pub fn greedy(params: &PolicyParams, x: &TokenSequence) -> Result<TokenSequence, PolicyError> {
    sample_with(params, x, 0.0, 1.0, || 0.0)
}

fn sample_with(
    params: &PolicyParams,
    x: &TokenSequence,
    temperature: f64,
    top_p: f64,
    mut uniform: impl FnMut() -> f64,
) -> Result<TokenSequence, PolicyError> {
    if !(temperature >= 0.0 && temperature.is_finite() && top_p > 0.0 && top_p <= 1.0) {
        return Err(PolicyError::InvalidSampling { temperature, top_p });
    }
    let ctx = context_encode(params, x)?;
    let mut out = Vec::with_capacity(params.config.max_len);
    for t in 0..params.config.max_len {
        let logits = project(params, &hidden(params, &ctx, t));
        let tok = if temperature == 0.0 {
            argmax(&logits)
        } else {
            let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
            draw_nucleus(&softmax(&scaled), top_p, uniform())
        };
        out.push(tok as u32);
    }
    Ok(TokenSequence::from_raw(out))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn draw_nucleus(probs: &[f64], top_p: f64, u: f64) -> usize {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    let mut keep = probs.len();
    if top_p < 1.0 {
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let mut mass = 0.0;
        for (i, &idx) in order.iter().enumerate() {
            mass += probs[idx];
            if mass >= top_p {
                keep = i + 1;
                break;
            }
        }
    }
    let kept = &order[..keep];
    let total: f64 = kept.iter().map(|&i| probs[i]).sum();
    let target = u * total;
    let mut acc = 0.0;
    for &i in kept {
        acc += probs[i];
        if target < acc {
            return i;
        }
    }
    *kept.last().expect("vocabulary is non-empty")
}

/// Adds `scale * d f / d theta` to `grad`, where `logit_grads[t]` holds
/// `d f / d logits_t` for positions `0..logit_grads.len()`.
pub fn accumulate_logit_grads(
    params: &PolicyParams,
    x: &TokenSequence,
    logit_grads: &[Vec<f64>],
    scale: f64,
    grad: &mut PolicyParams,
) -> Result<(), PolicyError> {
    params.check_same_shape(grad)?;
    if logit_grads.is_empty() || scale == 0.0 {
        return Ok(());
    }
    let (v, d) = (params.config.vocab_size, params.config.dim);
    let ctx = context_encode(params, x)?;
    let mut d_ctx = vec![0.0; d];
    for (t, g) in logit_grads.iter().enumerate() {
        let h = hidden(params, &ctx, t);
        {
            let bias = grad.output_bias_mut();
            bias.iter_mut().zip(g).for_each(|(b, gv)| *b += scale * gv);
        }
        let mut d_h = vec![0.0; d];
        {
            let proj = params.output_proj();
            let gproj = grad.output_proj_mut();
            for j in 0..d {
                let row = &proj[j * v..(j + 1) * v];
                let grow = &mut gproj[j * v..(j + 1) * v];
                let mut acc = 0.0;
                for k in 0..v {
                    grow[k] += scale * h[j] * g[k];
                    acc += row[k] * g[k];
                }
                d_h[j] = acc;
            }
        }
        let gpos = &mut grad.pos_embed_mut()[t * d..(t + 1) * d];
        for j in 0..d {
            gpos[j] += scale * d_h[j];
            d_ctx[j] += d_h[j];
        }
    }
    if !x.is_empty() {
        let n = x.len() as f64;
        let gin = grad.input_embed_mut();
        for &tok in x.tokens() {
            let row = &mut gin[tok as usize * d..(tok as usize + 1) * d];
            row.iter_mut().zip(&d_ctx).for_each(|(r, dc)| *r += scale * dc / n);
        }
    }
    Ok(())
}

/// Adds `scale * grad log pi(y|x)` to `grad`.
pub fn accumulate_grad_logprob(
    params: &PolicyParams,
    x: &TokenSequence,
    y: &TokenSequence,
    scale: f64,
    grad: &mut PolicyParams,
) -> Result<(), PolicyError> {
    params.check_rewrite(y.tokens())?;
    let lp = position_log_probs(params, x, y.len())?;
    let logit_grads: Vec<Vec<f64>> = y
        .tokens()
        .iter()
        .zip(&lp)
        .map(|(&tok, row)| {
            let mut g: Vec<f64> = row.iter().map(|l| -l.exp()).collect();
            g[tok as usize] += 1.0;
            g
        })
        .collect();
    accumulate_logit_grads(params, x, &logit_grads, scale, grad)
}

/// Analytic gradient of [`logprob`].
pub fn grad_logprob(params: &PolicyParams, x: &TokenSequence, y: &TokenSequence) -> Result<PolicyParams, PolicyError> {
    let mut g = PolicyParams::zeros(params.config);
    accumulate_grad_logprob(params, x, y, 1.0, &mut g)?;
    Ok(g)
}

#[cfg(test)]
mod tests;
