use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::grpo::GrpoConfig;
use crate::policy::{PolicyConfig, SftConfig};
use crate::reward::{CurriculumSchedule, RewardMode, DEFAULT_ALPHA, SUCCESS_THRESHOLD};
use crate::synthenv::EnvConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySettings {
    pub dim: usize,
    /// Standard deviation of the random initialisation.
    pub init_scale: f64,
}

impl Default for PolicySettings {
    fn default() -> Self {
        Self {
            dim: 8,
            init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    /// Pool of scenarios that RL queries are drawn from.
    pub train_scenarios: usize,
    /// The first `sft_corpus` training scenarios form the SFT corpus.
    pub sft_corpus: usize,
    pub heldout_scenarios: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            train_scenarios: 256,
            sft_corpus: 256,
            heldout_scenarios: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ProtocolAddress {
    /// `host:port` of a running evaluator.
    Tcp(String),
    /// Program and arguments of an evaluator speaking over stdio.
    Command(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerSpec {
    Inprocess,
    Protocol(ProtocolAddress),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    #[serde(default)]
    pub policy: PolicySettings,
    #[serde(default)]
    pub sft: SftConfig,
    pub grpo: GrpoConfig,
    pub schedule: CurriculumSchedule,
    pub seeds: Vec<u64>,
    #[serde(default = "default_scorer")]
    pub scorer: ScorerSpec,
    #[serde(default)]
    pub data: DataSettings,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_scorer() -> ScorerSpec {
    ScorerSpec::Inprocess
}

fn default_threshold() -> f64 {
    SUCCESS_THRESHOLD
}

impl ExperimentConfig {
    /// Desk-scale defaults: the 20-token environment, dynamic curriculum with
    /// alpha = 3, B = 8, T = 400, lr = 5e-3, ten seeds.
    pub fn desk_default() -> Self {
        let grpo = GrpoConfig::desk();
        Self {
            env: EnvConfig::desk_default(0),
            policy: PolicySettings::default(),
            sft: SftConfig::default(),
            schedule: CurriculumSchedule {
                mode: RewardMode::Dynamic,
                alpha: DEFAULT_ALPHA,
                total_steps: grpo.total_steps,
            },
            grpo,
            seeds: (0..10).collect(),
            scorer: ScorerSpec::Inprocess,
            data: DataSettings::default(),
            threshold: SUCCESS_THRESHOLD,
        }
    }

    pub fn with_mode(&self, mode: RewardMode) -> Self {
        let mut c = self.clone();
        c.schedule.mode = mode;
        c
    }

    /// Sets the RL length in both the GRPO config and the schedule.
    pub fn with_total_steps(&self, steps: usize) -> Self {
        let mut c = self.clone();
        c.grpo.total_steps = steps;
        c.schedule.total_steps = steps;
        c
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            vocab_size: self.env.vocab.size(),
            max_len: self.env.max_len,
            dim: self.policy.dim,
        }
    }

    /// `grpo.total_steps == 0` skips the RL stage.
    pub fn rl_enabled(&self) -> bool {
        self.grpo.total_steps > 0
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        self.env
            .validate()
            .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        self.policy_config()
            .validate()
            .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        if self.schedule.total_steps != self.grpo.total_steps {
            return bad(format!(
                "schedule.total_steps ({}) must equal grpo.total_steps ({})",
                self.schedule.total_steps, self.grpo.total_steps
            ));
        }
        if self.rl_enabled() {
            self.grpo
                .validate()
                .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
            self.schedule
                .validate()
                .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.data.train_scenarios == 0 || self.data.heldout_scenarios == 0 {
            return bad("scenario counts must be >= 1".into());
        }
        if self.data.sft_corpus > self.data.train_scenarios {
            return bad("sft_corpus cannot exceed train_scenarios".into());
        }
        if !(self.policy.init_scale >= 0.0 && self.policy.init_scale.is_finite()) {
            return bad("init_scale must be finite and >= 0".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, HarnessError> {
        let c: Self = serde_json::from_str(s).map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let s = fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }
}
