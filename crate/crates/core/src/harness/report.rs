use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::Serialize;

use super::{ablation_rows, load_record, moving_average, render_markdown, AblationRow, HarnessError, RunRecord};
use crate::reward::RewardMode;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportOutcome {
    pub records: usize,
    pub rows: Vec<AblationRow>,
    pub warnings: Vec<String>,
}

impl ReportOutcome {
    /// False when any record was unreadable or any run failed.
    pub fn complete(&self) -> bool {
        self.warnings.is_empty()
    }
}

fn find_records(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            find_records(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "record.json") {
            out.push(path);
        }
    }
    Ok(())
}

/// Mean reward per step across runs, over the steps every run reached.
fn mean_curve(runs: &[&RunRecord]) -> Vec<f64> {
    let len = runs.iter().map(|r| r.log.len()).min().unwrap_or(0);
    (0..len)
        .map(|t| runs.iter().map(|r| r.log[t].mean_reward).sum::<f64>() / runs.len() as f64)
        .collect()
}

/// Reads every `record.json` below `runs_dir` and writes per-mode reward
/// curves, the ablation table and a JSON summary into `out_dir`.
pub fn report(runs_dir: &Path, out_dir: &Path, window: usize) -> Result<ReportOutcome, HarnessError> {
    if window == 0 {
        return Err(HarnessError::BadWindow);
    }
    let mut paths = Vec::new();
    find_records(runs_dir, &mut paths)?;
    let mut warnings = Vec::new();
    let mut records = Vec::new();
    for p in &paths {
        match load_record(p) {
            Ok(r) => {
                if let super::RunStatus::Failed { reason } = &r.status {
                    warnings.push(format!("{}: run failed: {reason}", p.display()));
                }
                records.push(r);
            }
            Err(e) => warnings.push(format!("{}: unreadable record: {e}", p.display())),
        }
    }
    for w in &warnings {
        warn!("{w}");
    }

    fs::create_dir_all(out_dir)?;
    let mut by_mode: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.completed()) {
        by_mode.entry(r.mode.as_str()).or_default().push(r);
    }
    for mode in RewardMode::ALL {
        let Some(runs) = by_mode.get(mode.as_str()) else {
            continue;
        };
        let raw = mean_curve(runs);
        let mut csv = String::from("step,raw,smoothed\n");
        if !raw.is_empty() {
            let smooth = moving_average(&raw, window)?;
            for (t, (r, s)) in raw.iter().zip(&smooth).enumerate() {
                csv.push_str(&format!("{t},{r},{s}\n"));
            }
        }
        fs::write(out_dir.join(format!("curve_{mode}.csv")), csv)?;
    }

    let rows = ablation_rows(&records);
    let mut md = render_markdown(&rows);
    if !warnings.is_empty() {
        md.push_str("\nWarnings:\n\n");
        for w in &warnings {
            md.push_str(&format!("- {w}\n"));
        }
    }
    fs::write(out_dir.join("ablation.md"), md)?;
    let outcome = ReportOutcome {
        records: records.len(),
        rows,
        warnings,
    };
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&outcome).expect("summary serializes"),
    )?;
    Ok(outcome)
}
