use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{grpo_loss_and_grad, rollout, GrpoConfig, GrpoError, RefMode};
use crate::evalproto::Scorer;
use crate::exec::Executor;
use crate::optim::{clip_grad_norm, linear_decay, AdamState};
use crate::policy::PolicyParams;
use crate::reward::CurriculumSchedule;
use crate::seed;
use crate::tokenspace::TokenSequence;

/// One row of the run log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_sa: f64,
    pub mean_pc: f64,
    pub w_sa: f64,
    pub w_pc: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,mean_reward,mean_sa,mean_pc,w_sa,w_pc,kl,grad_norm,lr";
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub params: PolicyParams,
    pub old_params: PolicyParams,
    pub ref_params: PolicyParams,
    pub adam: AdamState,
    pub master_seed: u64,
}

impl TrainState {
    pub fn new(init: PolicyParams, master_seed: u64) -> Self {
        let n = init.as_slice().len();
        Self {
            step: 0,
            old_params: init.clone(),
            ref_params: init.clone(),
            params: init,
            adam: AdamState::new(n),
            master_seed,
        }
    }
}

/// JSON sidecar written next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub step: usize,
    pub config_hash: String,
    pub schedule: CurriculumSchedule,
    pub rng_state: RngState,
}

/// Every stream is derived from the master seed and the step, so the
/// position in the run is the whole generator state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub master_seed: u64,
    pub next_step: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub exec: Executor,
    /// Where to write `checkpoint.json` and `checkpoint.sidecar.json` on abort.
    pub checkpoint_dir: Option<PathBuf>,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub log: Vec<StepLog>,
}

pub fn write_checkpoint(dir: &Path, params: &PolicyParams, sidecar: &Sidecar) -> Result<PathBuf, std::io::Error> {
    fs::create_dir_all(dir)?;
    let path = dir.join("checkpoint.json");
    params.save(&path).map_err(std::io::Error::other)?;
    fs::write(
        dir.join("checkpoint.sidecar.json"),
        serde_json::to_string_pretty(sidecar).expect("sidecar serializes"),
    )?;
    Ok(path)
}

/// Runs `config.total_steps` GRPO steps from `init`.
///
/// Each step refreshes the sampling policy, samples `batch_size` queries
/// from `query_pool`, rolls out and scores `group_size` candidates per query,
/// and applies `inner_epochs` clipped AdamW updates with a linearly decayed
/// learning rate.
pub fn train(
    init: &PolicyParams,
    config: &GrpoConfig,
    schedule: &CurriculumSchedule,
    scorer: &dyn Scorer,
    query_pool: &[TokenSequence],
    master_seed: u64,
    opts: &TrainOptions,
) -> Result<TrainOutcome, GrpoError> {
    config.validate()?;
    schedule.validate()?;
    if schedule.total_steps != config.total_steps {
        return Err(GrpoError::InvalidConfig(format!(
            "schedule has {} steps but config has {}",
            schedule.total_steps, config.total_steps
        )));
    }
    if query_pool.is_empty() {
        return Err(GrpoError::InvalidConfig("empty query pool".into()));
    }

    let mut state = TrainState::new(init.clone(), master_seed);
    let mut log = Vec::with_capacity(config.total_steps);
    let abort = |state: &TrainState, reason: String| -> GrpoError {
        let checkpoint = opts.checkpoint_dir.as_deref().and_then(|dir| {
            let sidecar = Sidecar {
                step: state.step,
                config_hash: opts.config_hash.clone(),
                schedule: *schedule,
                rng_state: RngState {
                    master_seed,
                    next_step: state.step,
                },
            };
            write_checkpoint(dir, &state.params, &sidecar)
                .map_err(|e| warn!("could not write abort checkpoint: {e}"))
                .ok()
        });
        GrpoError::Aborted {
            step: state.step,
            reason,
            checkpoint,
        }
    };

    for t in 0..config.total_steps {
        state.step = t;
        state.old_params = state.params.clone();
        if config.ref_mode == RefMode::OldPolicy {
            state.ref_params = state.old_params.clone();
        }
        let weights = schedule.weights_at(t)?;
        let mut qrng = seed::stream(master_seed, &[seed::stage::QUERY, t as u64]);
        let queries: Vec<TokenSequence> = (0..config.batch_size)
            .map(|_| query_pool[qrng.random_range(0..query_pool.len())].clone())
            .collect();
        let groups = match rollout(
            &state.old_params,
            &queries,
            scorer,
            weights,
            t,
            master_seed,
            config,
            &opts.exec,
        ) {
            Ok(g) => g,
            Err(e) => return Err(abort(&state, e.to_string())),
        };

        let lr = linear_decay(t, config.total_steps, config.lr);
        let mut first: Option<(f64, f64)> = None;
        for _ in 0..config.inner_epochs {
            let out = match grpo_loss_and_grad(&state.params, &state.ref_params, &groups, config, &opts.exec) {
                Ok(o) => o,
                Err(e) => return Err(abort(&state, e.to_string())),
            };
            if !out.loss.is_finite() || !out.grad.is_finite() {
                return Err(abort(&state, format!("non-finite loss {} or gradient", out.loss)));
            }
            let mut grad = out.grad;
            let norm = clip_grad_norm(grad.as_mut_slice(), config.max_grad_norm);
            first.get_or_insert((out.kl, norm));
            let before = state.params.clone();
            state
                .adam
                .step(&config.adam, state.params.as_mut_slice(), grad.as_slice(), lr);
            if !state.params.is_finite() {
                state.params = before;
                return Err(abort(&state, "update produced non-finite parameters".into()));
            }
        }
        let (kl, grad_norm) = first.expect("inner_epochs >= 1");

        let n = (groups.len() * config.group_size) as f64;
        let sum = |f: &dyn Fn(&super::GroupRollout) -> f64| groups.iter().map(f).sum::<f64>() / n;
        let row = StepLog {
            step: t,
            mean_reward: sum(&|g| g.rewards.iter().sum()),
            mean_sa: sum(&|g| g.scores.iter().map(|s| s.sa).sum()),
            mean_pc: sum(&|g| g.scores.iter().map(|s| s.pc).sum()),
            w_sa: weights.w_sa,
            w_pc: weights.w_pc,
            kl,
            grad_norm,
            lr,
        };
        debug!("grpo step {t}: reward {:.4} kl {:.5}", row.mean_reward, row.kl);
        log.push(row);
    }
    Ok(TrainOutcome {
        params: state.params,
        log,
    })
}
