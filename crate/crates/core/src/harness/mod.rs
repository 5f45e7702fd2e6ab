//! Experiment runner: SFT, GRPO and held-out evaluation for one seed, the
//! four-way reward-mode ablation, and report generation from run records.

mod ablate;
mod config;
mod report;

pub use ablate::{ablate, ablation_rows, render_markdown, AblateOptions, AblationReport, AblationRow};
pub use config::{DataSettings, ExperimentConfig, PolicySettings, ProtocolAddress, ScorerSpec};
pub use report::{report, ReportOutcome};

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalproto::{ClientOptions, InProcessScorer, MockEvaluator, ProtocolClient, ProtocolError, Scorer};
use crate::exec::Executor;
use crate::grpo::{self, GrpoError, StepLog, TrainOptions};
use crate::policy::{self, sft_train, PolicyError, PolicyParams};
use crate::reward::{summarize, MetricsSummary, RewardError, RewardMode, RewardScore};
use crate::seed;
use crate::synthenv::{self, EnvConfig, EnvError};
use crate::tokenspace::{sample_scenario, Scenario, TokenError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(String),
    #[error("moving average needs a non-empty series and window >= 1")]
    BadWindow,
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Token(#[from] TokenError),
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub mode: RewardMode,
    pub status: RunStatus,
    pub sft_epoch_losses: Vec<f64>,
    /// Held-out metrics of the policy entering RL.
    pub sft_metrics: Option<MetricsSummary>,
    /// Held-out metrics after RL.
    pub final_metrics: Option<MetricsSummary>,
    pub log: Vec<StepLog>,
    pub duration_secs: f64,
}

impl RunRecord {
    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub exec: Executor,
    /// Directory for the run artefacts; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    pub client: ClientOptions,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            exec: Executor::sequential(),
            out_dir: None,
            client: ClientOptions::default(),
        }
    }
}

/// Scenarios drawn from the `stage` stream of `seed`.
pub fn scenarios(env: &EnvConfig, n: usize, seed: u64, stage: u64) -> Result<Vec<Scenario>, HarnessError> {
    let mut rng = seed::stream(seed, &[stage]);
    (0..n)
        .map(|_| sample_scenario(&env.vocab, env.k, &mut rng).map_err(HarnessError::from))
        .collect()
}

/// Greedy decoding on every scenario, scored without noise.
pub fn evaluate(
    params: &PolicyParams,
    env: &EnvConfig,
    scenarios: &[Scenario],
    threshold: f64,
    exec: &Executor,
) -> Result<MetricsSummary, HarnessError> {
    let scores = exec.map(scenarios, |s| -> Result<RewardScore, HarnessError> {
        let y = policy::greedy(params, &s.query())?;
        let (score, _) = synthenv::score::<rand_chacha::ChaCha8Rng>(env, s, &y, None)?;
        Ok(score)
    });
    let scores: Vec<RewardScore> = scores.into_iter().collect::<Result<_, _>>()?;
    Ok(summarize(&scores, threshold)?)
}

/// Trailing moving average: entry `i` is the mean of the last `window`
/// values up to and including `i`.
pub fn moving_average(series: &[f64], window: usize) -> Result<Vec<f64>, HarnessError> {
    if series.is_empty() || window == 0 {
        return Err(HarnessError::BadWindow);
    }
    Ok((0..series.len())
        .map(|i| {
            let w = &series[(i + 1).saturating_sub(window)..=i];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect())
}

/// `window`-step moving average of the logged mean reward.
pub fn smoothed_rewards(log: &[StepLog], window: usize) -> Result<Vec<f64>, HarnessError> {
    let raw: Vec<f64> = log.iter().map(|r| r.mean_reward).collect();
    moving_average(&raw, window)
}

/// Mean of the smoothed reward over the final `frac` of the steps.
pub fn plateau(log: &[StepLog], window: usize, frac: f64) -> Result<f64, HarnessError> {
    let s = smoothed_rewards(log, window)?;
    let tail = ((s.len() as f64 * frac).ceil() as usize).clamp(1, s.len());
    Ok(s[s.len() - tail..].iter().sum::<f64>() / tail as f64)
}

/// First step whose smoothed reward reaches `target`.
pub fn first_step_reaching(log: &[StepLog], window: usize, target: f64) -> Result<Option<usize>, HarnessError> {
    Ok(smoothed_rewards(log, window)?.iter().position(|&r| r >= target))
}

/// Median of a non-empty slice; the mean of the two middle values for even
/// lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

pub fn build_scorer(config: &ExperimentConfig, opts: &RunOptions) -> Result<Box<dyn Scorer>, HarnessError> {
    Ok(match &config.scorer {
        ScorerSpec::Inprocess => Box::new(InProcessScorer::new(
            MockEvaluator::new(config.env.clone()),
            opts.exec.clone(),
        )),
        ScorerSpec::Protocol(ProtocolAddress::Tcp(addr)) => {
            Box::new(ProtocolClient::connect_tcp(addr.as_str(), opts.client)?)
        }
        ScorerSpec::Protocol(ProtocolAddress::Command(argv)) => {
            let (prog, args) = argv
                .split_first()
                .ok_or_else(|| HarnessError::InvalidConfig("empty evaluator command".into()))?;
            let mut cmd = Command::new(prog);
            cmd.args(args);
            Box::new(ProtocolClient::spawn(&mut cmd, opts.client)?)
        }
    })
}

struct Stages {
    sft_epoch_losses: Vec<f64>,
    sft_metrics: Option<MetricsSummary>,
    final_metrics: Option<MetricsSummary>,
    log: Vec<StepLog>,
    params: Option<PolicyParams>,
}

fn run_stages(
    config: &ExperimentConfig,
    seed: u64,
    opts: &RunOptions,
    scorer: Option<&dyn Scorer>,
    st: &mut Stages,
) -> Result<(), HarnessError> {
    let env = &config.env;
    let exec = &opts.exec;
    let train = scenarios(env, config.data.train_scenarios, seed, seed::stage::SCENARIOS_TRAIN)?;
    let heldout = scenarios(env, config.data.heldout_scenarios, seed, seed::stage::SCENARIOS_HELDOUT)?;

    let init = PolicyParams::random(
        config.policy_config(),
        config.policy.init_scale,
        &mut seed::stream(seed, &[seed::stage::INIT]),
    );
    let start = if config.sft.epochs > 0 && config.data.sft_corpus > 0 {
        let corpus = synthenv::make_sft_corpus(env, &train[..config.data.sft_corpus], exec)?;
        let out = sft_train(
            &init,
            &corpus,
            &config.sft,
            &mut seed::stream(seed, &[seed::stage::SFT]),
        )?;
        st.sft_epoch_losses = out.epoch_losses;
        out.params
    } else {
        init
    };
    st.sft_metrics = Some(evaluate(&start, env, &heldout, config.threshold, exec)?);
    info!("seed {seed}: entering RL with {:?}", st.sft_metrics);

    let end = if config.rl_enabled() {
        let built;
        let scorer = match scorer {
            Some(s) => s,
            None => {
                built = build_scorer(config, opts)?;
                built.as_ref()
            }
        };
        let pool: Vec<_> = train.iter().map(Scenario::query).collect();
        let topts = TrainOptions {
            exec: exec.clone(),
            checkpoint_dir: opts.out_dir.clone(),
            config_hash: config.hash(),
        };
        let out = grpo::train(&start, &config.grpo, &config.schedule, scorer, &pool, seed, &topts)?;
        st.log = out.log;
        out.params
    } else {
        start
    };
    st.final_metrics = Some(evaluate(&end, env, &heldout, config.threshold, exec)?);
    st.params = Some(end);
    Ok(())
}

/// Runs the whole pipeline for one seed. Failures inside the pipeline are
/// reported through [`RunRecord::status`]; only an invalid config or an
/// unwritable output directory is an `Err`.
pub fn run(config: &ExperimentConfig, seed: u64, opts: &RunOptions) -> Result<RunRecord, HarnessError> {
    run_with_scorer(config, seed, opts, None)
}

/// [`run`] with an explicit scorer in place of `config.scorer`.
pub fn run_with_scorer(
    config: &ExperimentConfig,
    seed: u64,
    opts: &RunOptions,
    scorer: Option<&dyn Scorer>,
) -> Result<RunRecord, HarnessError> {
    config.validate()?;
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), config.to_json())?;
    }
    let started = Instant::now();
    let mut st = Stages {
        sft_epoch_losses: Vec::new(),
        sft_metrics: None,
        final_metrics: None,
        log: Vec::new(),
        params: None,
    };
    let status = match run_stages(config, seed, opts, scorer, &mut st) {
        Ok(()) => RunStatus::Completed,
        Err(e) => {
            warn!("seed {seed} failed: {e}");
            RunStatus::Failed { reason: e.to_string() }
        }
    };
    let record = RunRecord {
        config_hash: config.hash(),
        seed,
        mode: config.schedule.mode,
        status,
        sft_epoch_losses: st.sft_epoch_losses,
        sft_metrics: st.sft_metrics,
        final_metrics: st.final_metrics,
        log: st.log,
        duration_secs: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &opts.out_dir {
        write_run(dir, &record, st.params.as_ref(), config)?;
    }
    Ok(record)
}

pub fn write_log_csv(path: &Path, log: &[StepLog]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    if log.is_empty() {
        w.write_record(StepLog::CSV_HEADER.split(','))?;
    }
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_run(
    dir: &Path,
    record: &RunRecord,
    params: Option<&PolicyParams>,
    config: &ExperimentConfig,
) -> Result<(), HarnessError> {
    write_log_csv(&dir.join("log.csv"), &record.log)?;
    let mut metrics = format!("stage,{}\n", MetricsSummary::CSV_HEADER);
    for (stage, m) in [("sft", &record.sft_metrics), ("final", &record.final_metrics)] {
        if let Some(m) = m {
            metrics.push_str(&format!("{stage},{}\n", m.to_csv_row()));
        }
    }
    fs::write(dir.join("metrics.csv"), metrics)?;
    if let Some(p) = params {
        let sidecar = grpo::Sidecar {
            step: record.log.len(),
            config_hash: record.config_hash.clone(),
            schedule: config.schedule,
            rng_state: grpo::RngState {
                master_seed: record.seed,
                next_step: record.log.len(),
            },
        };
        grpo::write_checkpoint(dir, p, &sidecar)?;
    }
    fs::write(
        dir.join("record.json"),
        serde_json::to_string_pretty(record).expect("record serializes"),
    )?;
    Ok(())
}

pub fn load_record(path: &Path) -> Result<RunRecord, HarnessError> {
    let s = fs::read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests;
