use super::*;
use proptest::prelude::*;

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk_default().with_total_steps(6);
    c.seeds = vec![1, 2];
    c.data = DataSettings {
        train_scenarios: 8,
        sft_corpus: 4,
        heldout_scenarios: 10,
    };
    c.sft.epochs = 2;
    c
}

#[test]
fn moving_average_examples() {
    let m = moving_average(&[1.0, 2.0, 3.0, 4.0], 2).unwrap();
    assert_eq!(m, vec![1.0, 1.5, 2.5, 3.5]);
    assert_eq!(moving_average(&[5.0, 1.0], 10).unwrap(), vec![5.0, 3.0]);
    assert!(moving_average(&[], 3).is_err());
    assert!(moving_average(&[1.0], 0).is_err());
    assert_eq!(moving_average(&[2.0, 2.0, 2.0], 2).unwrap(), vec![2.0; 3]);
    assert_eq!(moving_average(&[1.0, 7.0, 3.0], 1).unwrap(), vec![1.0, 7.0, 3.0]);
}

fn log_of(rewards: &[f64]) -> Vec<StepLog> {
    rewards
        .iter()
        .enumerate()
        .map(|(step, &r)| StepLog {
            step,
            mean_reward: r,
            mean_sa: r,
            mean_pc: r,
            w_sa: 0.5,
            w_pc: 0.5,
            kl: 0.0,
            grad_norm: 0.0,
            lr: 0.0,
        })
        .collect()
}

#[test]
fn curve_helpers() {
    let log = log_of(&[1.0, 3.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0]);
    assert_eq!(first_step_reaching(&log, 2, 4.0).unwrap(), Some(2));
    assert_eq!(first_step_reaching(&log, 2, 5.5).unwrap(), None);
    assert_eq!(plateau(&log, 1, 0.1).unwrap(), 5.0);
    assert_eq!(plateau(&log, 1, 1.0).unwrap(), 4.4);
    assert_eq!(smoothed_rewards(&log, 1).unwrap()[1], 3.0);
}

#[test]
fn median_examples() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
    assert_eq!(median(&[]), None);
}

#[test]
fn config_round_trips_and_hash_is_stable() {
    let c = tiny();
    let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.hash(), c.hash());
    assert_eq!(c.hash().len(), 16);
    assert_ne!(c.with_mode(RewardMode::Static).hash(), c.hash());
}

#[test]
fn config_rejects_unknown_fields_and_mismatched_lengths() {
    let mut v: serde_json::Value = serde_json::from_str(&tiny().to_json()).unwrap();
    v["grpo"]["learning_rate"] = 0.1.into();
    assert!(ExperimentConfig::from_json(&v.to_string()).is_err());

    let mut c = tiny();
    c.schedule.total_steps = 7;
    assert!(matches!(c.validate(), Err(HarnessError::InvalidConfig(_))));
    let mut c = tiny();
    c.seeds.clear();
    assert!(c.validate().is_err());
}

#[test]
fn scorer_spec_json_forms() {
    let s: ScorerSpec = serde_json::from_str(r#""inprocess""#).unwrap();
    assert_eq!(s, ScorerSpec::Inprocess);
    let s: ScorerSpec = serde_json::from_str(r#"{"protocol":{"tcp":"127.0.0.1:9"}}"#).unwrap();
    assert_eq!(s, ScorerSpec::Protocol(ProtocolAddress::Tcp("127.0.0.1:9".into())));
    let s: ScorerSpec = serde_json::from_str(r#"{"protocol":{"command":["cgrpo","mock-eval"]}}"#).unwrap();
    assert!(matches!(s, ScorerSpec::Protocol(ProtocolAddress::Command(v)) if v.len() == 2));
}

#[test]
fn run_writes_artifacts_and_is_repeatable() {
    let c = tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let opts = |d: &tempfile::TempDir, threads| RunOptions {
        exec: Executor::threads(threads),
        out_dir: Some(d.path().to_path_buf()),
        ..RunOptions::default()
    };
    let ra = run(&c, 3, &opts(&a, 1)).unwrap();
    let rb = run(&c, 3, &opts(&b, 3)).unwrap();
    assert!(ra.completed(), "{:?}", ra.status);
    assert_eq!(ra.log.len(), 6);
    assert_eq!(ra.sft_epoch_losses.len(), 2);
    for f in [
        "log.csv",
        "metrics.csv",
        "record.json",
        "config.json",
        "checkpoint.json",
        "checkpoint.sidecar.json",
    ] {
        assert!(a.path().join(f).exists(), "{f} missing");
    }
    let log_a = std::fs::read(a.path().join("log.csv")).unwrap();
    assert_eq!(log_a, std::fs::read(b.path().join("log.csv")).unwrap());
    assert_eq!(ra.final_metrics, rb.final_metrics);
    let header = String::from_utf8(log_a).unwrap();
    assert_eq!(header.lines().next().unwrap(), StepLog::CSV_HEADER);
    assert_eq!(load_record(&a.path().join("record.json")).unwrap(), ra);
}

#[test]
fn zero_steps_skips_rl() {
    let c = tiny().with_total_steps(0);
    let r = run(&c, 1, &RunOptions::default()).unwrap();
    assert!(r.completed());
    assert!(r.log.is_empty());
    assert_eq!(r.sft_metrics, r.final_metrics);
}

#[test]
fn unreachable_evaluator_marks_run_failed() {
    let mut c = tiny();
    c.scorer = ScorerSpec::Protocol(ProtocolAddress::Command(vec!["/nonexistent/evaluator".into()]));
    let r = run(&c, 1, &RunOptions::default()).unwrap();
    assert!(matches!(r.status, RunStatus::Failed { .. }));
    assert!(r.sft_metrics.is_some());
    assert!(r.final_metrics.is_none());
}

#[test]
fn ablation_and_report() {
    let mut c = tiny();
    c.seeds = vec![1];
    let dir = tempfile::tempdir().unwrap();
    let rep = ablate(
        &c,
        &c.seeds,
        &AblateOptions {
            exec: Executor::threads(2),
            out_dir: Some(dir.path().to_path_buf()),
            ..AblateOptions::default()
        },
    )
    .unwrap();
    assert_eq!(rep.runs.len(), 4);
    assert_eq!(rep.rows.len(), 4);
    assert!(dir.path().join("ablation.md").exists());

    let out = dir.path().join("report");
    let ok = report(&dir.path().join("runs"), &out, 3).unwrap();
    assert!(ok.complete());
    assert_eq!(ok.records, 4);
    assert_eq!(ok.rows, rep.rows);
    for mode in RewardMode::ALL {
        let curve = std::fs::read_to_string(out.join(format!("curve_{mode}.csv"))).unwrap();
        assert_eq!(curve.lines().count(), 7);
    }

    std::fs::write(dir.path().join("runs/static/seed_1/record.json"), "{ truncated").unwrap();
    let partial = report(&dir.path().join("runs"), &out, 3).unwrap();
    assert!(!partial.complete());
    assert_eq!(partial.records, 3);
    assert!(partial.rows.iter().all(|r| r.mode != RewardMode::Static));
    let md = std::fs::read_to_string(out.join("ablation.md")).unwrap();
    assert!(md.contains("unreadable record"));
}

proptest! {
    #[test]
    fn moving_average_preserves_monotonicity(mut v in proptest::collection::vec(-10.0f64..10.0, 1..40), w in 1usize..12) {
        v.sort_by(f64::total_cmp);
        let m = moving_average(&v, w).unwrap();
        for pair in m.windows(2) {
            prop_assert!(pair[1] >= pair[0] - 1e-12);
        }
    }
}
