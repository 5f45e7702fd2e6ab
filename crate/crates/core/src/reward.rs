//! Likert reward pairs, the reward-weighting curriculum and evaluation
//! metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("non-finite Likert value {0}")]
    NonFinite(f64),
    #[error("step {step} exceeds schedule length {total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("cannot summarize an empty score list")]
    Empty,
    #[error("unknown reward mode {0:?}")]
    UnknownMode(String),
}

pub const LIKERT_MIN: f64 = 1.0;
pub const LIKERT_MAX: f64 = 5.0;

/// Clamps a finite raw score to the 1..=5 Likert range.
pub fn likert_clamp(raw: f64) -> Result<f64, RewardError> {
    if !raw.is_finite() {
        return Err(RewardError::NonFinite(raw));
    }
    Ok(raw.clamp(LIKERT_MIN, LIKERT_MAX))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardScore {
    pub sa: f64,
    pub pc: f64,
}

impl RewardScore {
    /// Clamps both components.
    pub fn from_raw(sa: f64, pc: f64) -> Result<Self, RewardError> {
        Ok(Self {
            sa: likert_clamp(sa)?,
            pc: likert_clamp(pc)?,
        })
    }

    pub fn in_bounds(&self) -> bool {
        (LIKERT_MIN..=LIKERT_MAX).contains(&self.sa) && (LIKERT_MIN..=LIKERT_MAX).contains(&self.pc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    SaOnly,
    PcOnly,
    Static,
    Dynamic,
}

impl RewardMode {
    /// Ablation order: SA-only, PC-only, static, dynamic.
    pub const ALL: [RewardMode; 4] = [Self::SaOnly, Self::PcOnly, Self::Static, Self::Dynamic];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::SaOnly => "sa_only",
            Self::PcOnly => "pc_only",
            Self::Static => "static",
            Self::Dynamic => "dynamic",
        }
    }
}

impl fmt::Display for RewardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RewardMode {
    type Err = RewardError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| RewardError::UnknownMode(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub mode: RewardMode,
    /// Decay rate of the semantic weight; only read in dynamic mode.
    pub alpha: f64,
    pub total_steps: usize,
}

pub const DEFAULT_ALPHA: f64 = 3.0;

impl CurriculumSchedule {
    pub fn new(mode: RewardMode, alpha: f64, total_steps: usize) -> Result<Self, RewardError> {
        let s = Self {
            mode,
            alpha,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn dynamic(alpha: f64, total_steps: usize) -> Result<Self, RewardError> {
        Self::new(RewardMode::Dynamic, alpha, total_steps)
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        if self.total_steps == 0 {
            return Err(RewardError::InvalidSchedule("total_steps must be >= 1".into()));
        }
        if self.mode == RewardMode::Dynamic && !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(RewardError::InvalidSchedule(format!(
                "alpha must be finite and positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Reward weights at training step `step`.
    ///
    /// Dynamic mode uses `w_sa = exp(-alpha * step / T)`; the fixed modes
    /// return (1, 0), (0, 1) or (0.5, 0.5).
    pub fn weights_at(&self, step: usize) -> Result<WeightPair, RewardError> {
        if step > self.total_steps {
            return Err(RewardError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        let w_sa = match self.mode {
            RewardMode::Dynamic => (-self.alpha * step as f64 / self.total_steps as f64).exp(),
            RewardMode::Static => 0.5,
            RewardMode::SaOnly => 1.0,
            RewardMode::PcOnly => 0.0,
        };
        Ok(WeightPair::from_sa(w_sa))
    }
}

/// Semantic and physics weights; `w_pc` is always `1 - w_sa`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightPair {
    pub w_sa: f64,
    pub w_pc: f64,
}

impl WeightPair {
    pub fn from_sa(w_sa: f64) -> Self {
        Self { w_sa, w_pc: 1.0 - w_sa }
    }

    /// Scalarised reward `w_sa * sa + w_pc * pc`.
    pub fn composite(&self, score: &RewardScore) -> f64 {
        self.w_sa * score.sa + self.w_pc * score.pc
    }
}

pub fn composite(weights: &WeightPair, score: &RewardScore) -> f64 {
    weights.composite(score)
}

pub const SUCCESS_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub sa_pct: f64,
    pub pc_pct: f64,
    pub joint_pct: f64,
    pub avg_sa: f64,
    pub avg_pc: f64,
    pub n: usize,
}

impl MetricsSummary {
    pub const CSV_HEADER: &'static str = "sa_pct,pc_pct,joint_pct,avg_sa,avg_pc,n";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.sa_pct, self.pc_pct, self.joint_pct, self.avg_sa, self.avg_pc, self.n
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.to_csv_row())
    }
}

/// Success rates at `threshold` and average scores.
pub fn summarize(scores: &[RewardScore], threshold: f64) -> Result<MetricsSummary, RewardError> {
    if scores.is_empty() {
        return Err(RewardError::Empty);
    }
    let n = scores.len();
    let pct = |k: usize| 100.0 * k as f64 / n as f64;
    let sa_ok = scores.iter().filter(|s| s.sa >= threshold).count();
    let pc_ok = scores.iter().filter(|s| s.pc >= threshold).count();
    let joint = scores.iter().filter(|s| s.sa >= threshold && s.pc >= threshold).count();
    Ok(MetricsSummary {
        sa_pct: pct(sa_ok),
        pc_pct: pct(pc_ok),
        joint_pct: pct(joint),
        avg_sa: scores.iter().map(|s| s.sa).sum::<f64>() / n as f64,
        avg_pc: scores.iter().map(|s| s.pc).sum::<f64>() / n as f64,
        n,
    })
}
