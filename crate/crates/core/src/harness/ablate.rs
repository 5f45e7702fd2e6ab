use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use log::info;
use serde::{Deserialize, Serialize};

use super::{median, run, ExperimentConfig, HarnessError, RunOptions, RunRecord};
use crate::evalproto::ClientOptions;
use crate::exec::Executor;
use crate::reward::RewardMode;

#[derive(Debug, Clone)]
pub struct AblateOptions {
    /// Runs are distributed over this executor; each run is sequential inside.
    pub exec: Executor,
    pub out_dir: Option<PathBuf>,
    pub client: ClientOptions,
}

impl Default for AblateOptions {
    fn default() -> Self {
        Self {
            exec: Executor::sequential(),
            out_dir: None,
            client: ClientOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: RewardMode,
    pub sa_pct: f64,
    pub pc_pct: f64,
    pub joint_pct: f64,
    pub avg_sa: f64,
    pub avg_pc: f64,
    pub completed: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<RunRecord>,
}

impl AblationReport {
    pub fn row(&self, mode: RewardMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }
}

/// Per-mode medians of the final held-out metrics over completed runs.
/// Modes without any record are omitted; modes whose runs all failed get
/// NaN medians.
pub fn ablation_rows(records: &[RunRecord]) -> Vec<AblationRow> {
    RewardMode::ALL
        .iter()
        .filter_map(|&mode| {
            let of_mode: Vec<&RunRecord> = records.iter().filter(|r| r.mode == mode).collect();
            if of_mode.is_empty() {
                return None;
            }
            let finals: Vec<_> = of_mode
                .iter()
                .filter(|r| r.completed())
                .filter_map(|r| r.final_metrics)
                .collect();
            let med = |f: fn(&crate::reward::MetricsSummary) -> f64| {
                median(&finals.iter().map(f).collect::<Vec<_>>()).unwrap_or(f64::NAN)
            };
            Some(AblationRow {
                mode,
                sa_pct: med(|m| m.sa_pct),
                pc_pct: med(|m| m.pc_pct),
                joint_pct: med(|m| m.joint_pct),
                avg_sa: med(|m| m.avg_sa),
                avg_pc: med(|m| m.avg_pc),
                completed: finals.len(),
                failed: of_mode.len() - finals.len(),
            })
        })
        .collect()
}

pub fn render_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from("| mode | SA % | PC % | joint % | avg SA | avg PC | runs | failed |\n");
    s.push_str("|---|---:|---:|---:|---:|---:|---:|---:|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {:.1} | {:.1} | {:.1} | {:.3} | {:.3} | {} | {} |",
            r.mode, r.sa_pct, r.pc_pct, r.joint_pct, r.avg_sa, r.avg_pc, r.completed, r.failed
        );
    }
    s
}

/// Trains every reward mode on every seed and tabulates the medians.
pub fn ablate(config: &ExperimentConfig, seeds: &[u64], opts: &AblateOptions) -> Result<AblationReport, HarnessError> {
    config.validate()?;
    if seeds.is_empty() {
        return Err(HarnessError::InvalidConfig("no seeds".into()));
    }
    let jobs: Vec<(RewardMode, u64)> = RewardMode::ALL
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let results = opts.exec.map(&jobs, |&(mode, seed)| {
        let cfg = config.with_mode(mode);
        let run_opts = RunOptions {
            exec: Executor::sequential(),
            out_dir: opts
                .out_dir
                .as_ref()
                .map(|d| d.join("runs").join(mode.as_str()).join(format!("seed_{seed}"))),
            client: opts.client,
        };
        let rec = run(&cfg, seed, &run_opts);
        if let Ok(r) = &rec {
            info!("{mode} seed {seed}: {:?}", r.final_metrics.map(|m| m.joint_pct));
        }
        rec
    });
    let runs: Vec<RunRecord> = results.into_iter().collect::<Result<_, _>>()?;
    let report = AblationReport {
        rows: ablation_rows(&runs),
        runs,
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("ablation.md"), render_markdown(&report.rows))?;
        fs::write(
            dir.join("ablation.json"),
            serde_json::to_string_pretty(&report.rows).expect("rows serialize"),
        )?;
    }
    Ok(report)
}
