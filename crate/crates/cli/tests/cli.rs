use std::fs;
use std::process::Command;

use curriculum_grpo::harness::{self, DataSettings, ExperimentConfig, ProtocolAddress, RunOptions, ScorerSpec};
use curriculum_grpo::Executor;

const BIN: &str = env!("CARGO_BIN_EXE_cgrpo");

fn small_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk_default().with_total_steps(8);
    c.seeds = vec![4];
    c.data = DataSettings {
        train_scenarios: 8,
        sft_corpus: 4,
        heldout_scenarios: 12,
    };
    c.sft.epochs = 2;
    c
}

#[test]
fn oracle_reports_sa_optimum() {
    let out = Command::new(BIN)
        .args(["oracle", "--objective", "sa"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["sa"], 5.0);
    assert!(v["pc"].as_f64().unwrap() <= 3.0);
}

#[test]
fn protocol_scoring_matches_in_process() {
    let c = small_config();
    let mut remote = c.clone();
    remote.scorer = ScorerSpec::Protocol(ProtocolAddress::Command(vec![
        BIN.into(),
        "mock-eval".into(),
        "--transport".into(),
        "stdio".into(),
    ]));
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let opts = |d: &tempfile::TempDir| RunOptions {
        exec: Executor::sequential(),
        out_dir: Some(d.path().to_path_buf()),
        ..RunOptions::default()
    };
    let ra = harness::run(&c, 4, &opts(&a)).unwrap();
    let rb = harness::run(&remote, 4, &opts(&b)).unwrap();
    assert!(ra.completed() && rb.completed(), "{:?} {:?}", ra.status, rb.status);
    assert_eq!(
        fs::read(a.path().join("log.csv")).unwrap(),
        fs::read(b.path().join("log.csv")).unwrap()
    );
}

#[test]
fn train_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, small_config().to_json()).unwrap();
    let run_dir = dir.path().join("runs/seed_4");
    let st = Command::new(BIN)
        .args(["--threads", "2", "train", "--config"])
        .arg(&cfg)
        .args(["--seed", "4", "--out"])
        .arg(&run_dir)
        .status()
        .unwrap();
    assert!(st.success());
    assert!(run_dir.join("log.csv").exists());

    let report = |out: &str| {
        Command::new(BIN)
            .arg("report")
            .arg("--runs")
            .arg(dir.path().join("runs"))
            .arg("--out")
            .arg(dir.path().join(out))
            .args(["--window", "3"])
            .status()
            .unwrap()
    };
    assert_eq!(report("rep").code(), Some(0));
    assert!(dir.path().join("rep/curve_dynamic.csv").exists());

    fs::create_dir_all(dir.path().join("runs/broken")).unwrap();
    fs::write(dir.path().join("runs/broken/record.json"), "{").unwrap();
    assert_eq!(report("rep2").code(), Some(2));
}

#[test]
fn bad_config_exits_with_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{\"env\": 3}").unwrap();
    let st = Command::new(BIN)
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .args(["--seed", "1", "--out"])
        .arg(dir.path().join("o"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(1));
}
