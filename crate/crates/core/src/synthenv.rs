//! Synthetic generator-plus-evaluator stand-in.
//!
//! A rewrite is scored from its token multiset alone. Semantic adherence
//! rewards covering the scenario's intents; physical commonsense rewards up
//! to `pc_cap` physics tokens compatible with the scenario class. With the
//! default weights and `L = 5` the two objectives conflict: covering all four
//! intents leaves one slot for physics (PC at most 3), while maximal PC needs
//! two physics slots (SA at most 4).

use std::collections::HashMap;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Executor;
use crate::policy::SftExample;
use crate::reward::{RewardError, RewardScore, WeightPair, SUCCESS_THRESHOLD};
use crate::tokenspace::{Role, Scenario, TokenError, TokenSequence, Vocab};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("enumeration of {states} multisets exceeds the bound {bound}")]
    TooLarge { states: u128, bound: u128 },
    #[error("unknown objective {0:?}")]
    UnknownObjective(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvWeights {
    pub sa_gain: f64,
    pub incompat_penalty: f64,
    pub distractor_penalty: f64,
    pub pc_gain: f64,
    pub pc_cap: usize,
    pub pc_incompat_penalty: f64,
}

impl Default for EnvWeights {
    fn default() -> Self {
        Self {
            sa_gain: 4.0,
            incompat_penalty: 0.5,
            distractor_penalty: 0.25,
            pc_gain: 2.0,
            pc_cap: 2,
            pc_incompat_penalty: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub vocab: Vocab,
    /// Intents per scenario.
    pub k: usize,
    /// Rewrite length budget.
    pub max_len: usize,
    pub noise_sigma: f64,
    #[serde(default)]
    pub weights: EnvWeights,
}

impl EnvConfig {
    /// The desk-scale default: 20-token vocabulary, k = 4, L = 5, sigma = 0.25.
    pub fn desk_default(vocab_seed: u64) -> Self {
        Self {
            vocab: Vocab::desk_default(vocab_seed),
            k: 4,
            max_len: 5,
            noise_sigma: 0.25,
            weights: EnvWeights::default(),
        }
    }

    pub fn noiseless(mut self) -> Self {
        self.noise_sigma = 0.0;
        self
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let w = &self.weights;
        let bad = |m: String| Err(EnvError::InvalidConfig(m));
        if self.max_len == 0 {
            return bad("max_len must be >= 1".into());
        }
        if self.k == 0 || self.k > self.vocab.n_intent() {
            return bad(format!("k={} must be in 1..={}", self.k, self.vocab.n_intent()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        let gains = [
            w.sa_gain,
            w.incompat_penalty,
            w.distractor_penalty,
            w.pc_gain,
            w.pc_incompat_penalty,
        ];
        if gains.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return bad("gains and penalties must be finite and >= 0".into());
        }
        self.vocab.cue_token(0)?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("env config serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self, EnvError> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| EnvError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub c_intent: usize,
    pub c_compat: usize,
    pub c_incompat: usize,
    pub c_distract: usize,
    pub raw_sa: f64,
    pub raw_pc: f64,
}

/// Scores rewrite `y` for `scenario`. With `noise` present, independent
/// Gaussian noise of standard deviation `noise_sigma` is added to each raw
/// component before clamping.
pub fn score<R: Rng + ?Sized>(
    config: &EnvConfig,
    scenario: &Scenario,
    y: &TokenSequence,
    noise: Option<&mut R>,
) -> Result<(RewardScore, ScoreBreakdown), EnvError> {
    let vocab = &config.vocab;
    for &t in y.tokens() {
        vocab.check_token(t)?;
    }
    let mut counts = vec![0u8; vocab.size()];
    for &t in y.tokens() {
        counts[t as usize] = counts[t as usize].saturating_add(1);
    }
    let mut b = breakdown_from_counts(config, scenario, |t| counts[t as usize] as usize);
    if let Some(rng) = noise {
        if config.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, config.noise_sigma).expect("validated sigma");
            b.raw_sa += normal.sample(rng);
            b.raw_pc += normal.sample(rng);
        }
    }
    Ok((RewardScore::from_raw(b.raw_sa, b.raw_pc)?, b))
}

fn breakdown_from_counts(config: &EnvConfig, scenario: &Scenario, count: impl Fn(u32) -> usize) -> ScoreBreakdown {
    let vocab = &config.vocab;
    let w = &config.weights;
    let c_intent = scenario.intent_tokens.iter().filter(|&&t| count(t) > 0).count();
    let (mut c_compat, mut c_incompat) = (0, 0);
    for t in vocab.physics_tokens() {
        if vocab.physics_class(t) == Some(scenario.class_id) {
            c_compat += count(t);
        } else {
            c_incompat += count(t);
        }
    }
    let c_distract: usize = vocab.distractor_tokens().map(&count).sum();
    let raw_sa = 1.0 + w.sa_gain * (c_intent as f64 / config.k as f64)
        - w.incompat_penalty * c_incompat as f64
        - w.distractor_penalty * c_distract as f64;
    let raw_pc = 1.0 + w.pc_gain * c_compat.min(w.pc_cap) as f64 - w.pc_incompat_penalty * c_incompat as f64;
    ScoreBreakdown {
        c_intent,
        c_compat,
        c_incompat,
        c_distract,
        raw_sa,
        raw_pc,
    }
}

/// Noiseless score from a count vector indexed by token id.
fn score_counts(config: &EnvConfig, scenario: &Scenario, counts: &[u8]) -> RewardScore {
    let b = breakdown_from_counts(config, scenario, |t| counts[t as usize] as usize);
    RewardScore {
        sa: b.raw_sa.clamp(1.0, 5.0),
        pc: b.raw_pc.clamp(1.0, 5.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Sa,
    Pc,
    /// 1 when both components reach the success threshold, else 0.
    JointIndicator,
    Composite(WeightPair),
}

impl Objective {
    pub fn value(&self, s: &RewardScore) -> f64 {
        match self {
            Self::Sa => s.sa,
            Self::Pc => s.pc,
            Self::JointIndicator => f64::from(s.sa >= SUCCESS_THRESHOLD && s.pc >= SUCCESS_THRESHOLD),
            Self::Composite(w) => w.composite(s),
        }
    }

    /// Parses `sa`, `pc`, `joint` or `composite:<w_sa>`.
    pub fn parse(s: &str) -> Result<Self, EnvError> {
        match s {
            "sa" => Ok(Self::Sa),
            "pc" => Ok(Self::Pc),
            "joint" | "joint_indicator" => Ok(Self::JointIndicator),
            _ => s
                .strip_prefix("composite:")
                .and_then(|w| w.parse::<f64>().ok())
                .filter(|w| (0.0..=1.0).contains(w))
                .map(|w| Self::Composite(WeightPair::from_sa(w)))
                .ok_or_else(|| EnvError::UnknownObjective(s.to_string())),
        }
    }
}

pub const DEFAULT_ENUMERATION_BOUND: u128 = 10_000_000;

/// Number of multisets of size `len` over `size` tokens.
pub fn multiset_count(size: usize, len: usize) -> u128 {
    // C(size + len - 1, len), computed incrementally to stay exact.
    let n = (size + len).saturating_sub(1) as u128;
    let mut c: u128 = 1;
    for i in 0..len as u128 {
        c = c.saturating_mul(n - i) / (i + 1);
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    /// Sorted ascending.
    pub multiset: TokenSequence,
    pub score: RewardScore,
    pub value: f64,
}

/// Visits every non-decreasing sequence of length `len` over `lo..size` that
/// starts with `first`, in lexicographic order.
fn for_each_multiset(size: u32, len: usize, first: u32, mut f: impl FnMut(&[u32], &[u8])) {
    let mut seq = vec![first; len];
    let mut counts = vec![0u8; size as usize];
    counts[first as usize] = len as u8;
    loop {
        f(&seq, &counts);
        // Advance the rightmost position that can still grow; position 0 is fixed.
        let mut i = len;
        loop {
            if i <= 1 {
                return;
            }
            i -= 1;
            if seq[i] + 1 < size {
                break;
            }
        }
        let next = seq[i] + 1;
        for s in &mut seq[i..] {
            counts[*s as usize] -= 1;
            *s = next;
            counts[next as usize] += 1;
        }
    }
}

/// Exhaustive noiseless maximisation of `objective` over token multisets of
/// size exactly `max_len`. Ties go to the lexicographically smallest sorted
/// multiset.
pub fn brute_force_best(
    config: &EnvConfig,
    scenario: &Scenario,
    objective: Objective,
    exec: &Executor,
) -> Result<OracleResult, EnvError> {
    brute_force_best_bounded(config, scenario, objective, exec, DEFAULT_ENUMERATION_BOUND)
}

pub fn brute_force_best_bounded(
    config: &EnvConfig,
    scenario: &Scenario,
    objective: Objective,
    exec: &Executor,
    bound: u128,
) -> Result<OracleResult, EnvError> {
    let size = config.vocab.size();
    let len = config.max_len;
    let states = multiset_count(size, len);
    if states > bound {
        return Err(EnvError::TooLarge { states, bound });
    }
    if len > u8::MAX as usize {
        return Err(EnvError::InvalidConfig("max_len too large for enumeration".into()));
    }
    let per_first = exec.map_range(size, |first| {
        let mut best: Option<(f64, Vec<u32>, RewardScore)> = None;
        for_each_multiset(size as u32, len, first as u32, |seq, counts| {
            let s = score_counts(config, scenario, counts);
            let v = objective.value(&s);
            if best.as_ref().is_none_or(|(bv, _, _)| v > *bv) {
                best = Some((v, seq.to_vec(), s));
            }
        });
        best
    });
    let (value, seq, score) = per_first
        .into_iter()
        .flatten()
        .reduce(|acc, cand| if cand.0 > acc.0 { cand } else { acc })
        .expect("vocabulary is non-empty");
    Ok(OracleResult {
        multiset: TokenSequence::from_raw(seq),
        score,
        value,
    })
}

/// Every multiset together with its optimal-value membership, for auditing.
pub fn enumerate_scores(
    config: &EnvConfig,
    scenario: &Scenario,
    bound: u128,
) -> Result<Vec<(Vec<u32>, RewardScore)>, EnvError> {
    let size = config.vocab.size();
    let states = multiset_count(size, config.max_len);
    if states > bound {
        return Err(EnvError::TooLarge { states, bound });
    }
    let mut out = Vec::with_capacity(states as usize);
    for first in 0..size as u32 {
        for_each_multiset(size as u32, config.max_len, first, |seq, counts| {
            out.push((seq.to_vec(), score_counts(config, scenario, counts)));
        });
    }
    Ok(out)
}

/// Writes `multiset,sa,pc` rows, multiset tokens space-separated.
pub fn write_enumeration_csv<W: Write>(config: &EnvConfig, scenario: &Scenario, out: W) -> Result<(), EnvError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["multiset", "sa", "pc"]).map_err(csv_err)?;
    for (seq, s) in enumerate_scores(config, scenario, DEFAULT_ENUMERATION_BOUND)? {
        let ms = seq.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
        w.write_record([ms, s.sa.to_string(), s.pc.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> EnvError {
    EnvError::Io(std::io::Error::other(e))
}

/// One SFT example per scenario: the query paired with the lexicographically
/// smallest joint-success multiset, in sorted order.
pub fn make_sft_corpus(
    config: &EnvConfig,
    scenarios: &[Scenario],
    exec: &Executor,
) -> Result<Vec<SftExample>, EnvError> {
    let mut cache: HashMap<(u32, Vec<u32>), TokenSequence> = HashMap::new();
    let mut out = Vec::with_capacity(scenarios.len());
    for s in scenarios {
        let key = (s.class_id, s.intent_tokens.clone());
        let target = match cache.get(&key) {
            Some(t) => t.clone(),
            None => {
                let best = brute_force_best(config, s, Objective::JointIndicator, exec)?;
                cache.insert(key, best.multiset.clone());
                best.multiset
            }
        };
        out.push(SftExample {
            x: s.query(),
            y_target: target,
        });
    }
    Ok(out)
}

/// Role counts of a rewrite, independent of any scenario.
pub fn role_counts(vocab: &Vocab, y: &TokenSequence) -> [usize; 3] {
    let mut c = [0; 3];
    for &t in y.tokens() {
        match vocab.role(t) {
            Some(Role::Intent) => c[0] += 1,
            Some(Role::Physics) => c[1] += 1,
            Some(Role::Distractor) => c[2] += 1,
            None => {}
        }
    }
    c
}
