mod common;

use common::small_moons;
use shiftgauge_core::harness::{run_experiment, ExperimentConfig, REPORT_COLUMNS};
use shiftgauge_core::Error;

#[test]
fn zero_shift_naive_single_seed() {
    let report = run_experiment(&small_moons(0.0, &["naive"], &[0])).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.summary.len(), 1);
    let row = &report.rows[0];
    assert_eq!(row.status, "ok");
    assert!(row.abs_error.unwrap() < 0.05, "abs_error {:?}", row.abs_error);
}

#[test]
fn identical_config_gives_identical_files() {
    let cfg = small_moons(30.0, &["naive", "rnd", "adv", "aap", "ac"], &[0, 1]);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_experiment(&cfg).unwrap().write_to(&a).unwrap();
    run_experiment(&cfg).unwrap().write_to(&b).unwrap();
    for name in ["report.csv", "summary.csv", "report.json"] {
        let (x, y) = (std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
        assert!(!x.is_empty());
        assert!(x == y, "{name} differs between reruns");
    }
}

#[test]
fn report_rows_and_summary_agree() {
    let cfg = small_moons(30.0, &["naive", "rnd_ens", "adv", "aap", "doc", "gde"], &[0, 1, 2]);
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.rows.len(), 3 * cfg.estimators.len());
    for r in &report.rows {
        let (e, t, a) = (r.estimate.unwrap(), r.true_error.unwrap(), r.abs_error.unwrap());
        assert_eq!(a, (e - t).abs());
        assert!((0.0..=1.0).contains(&e));
    }
    for s in &report.summary {
        let errs: Vec<f64> = report.rows_for(&s.estimator).map(|r| r.abs_error.unwrap()).collect();
        let n = errs.len() as f64;
        let mean = errs.iter().sum::<f64>() / n;
        let std = (errs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert_eq!(s.n, errs.len());
        assert!((s.mae_mean - mean).abs() < 1e-12);
        assert!((s.mae_std - std).abs() < 1e-12);
    }
    // Every seed's true error is the same for all of its estimators.
    for seed in &cfg.seeds {
        let truths: Vec<f64> = report.rows.iter().filter(|r| r.seed == *seed).map(|r| r.true_error.unwrap()).collect();
        assert!(truths.windows(2).all(|w| w[0] == w[1]));
    }
}

#[test]
fn report_csv_header_and_shape() {
    let report = run_experiment(&small_moons(20.0, &["naive", "ac"], &[3])).unwrap();
    let csv = String::from_utf8(report.report_csv().unwrap()).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), REPORT_COLUMNS.join(","));
    assert_eq!(lines.count(), 2);
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn changing_one_seed_leaves_the_others_alone() {
    let est = ["naive", "adv", "aap"];
    let a = run_experiment(&small_moons(30.0, &est, &[0, 1])).unwrap();
    let b = run_experiment(&small_moons(30.0, &est, &[0, 7])).unwrap();
    let seed0 = |r: &shiftgauge_core::harness::EstimateReport| r.rows.iter().filter(|x| x.seed == 0).cloned().collect::<Vec<_>>();
    assert_eq!(seed0(&a), seed0(&b));
    assert_ne!(
        a.rows.iter().filter(|x| x.seed == 1).map(|x| x.true_error).collect::<Vec<_>>(),
        b.rows.iter().filter(|x| x.seed == 7).map(|x| x.true_error).collect::<Vec<_>>()
    );
}

#[test]
fn seed_order_does_not_change_rows() {
    let est = ["naive", "rnd"];
    let a = run_experiment(&small_moons(30.0, &est, &[4, 5])).unwrap();
    let b = run_experiment(&small_moons(30.0, &est, &[5, 4])).unwrap();
    for seed in [4, 5] {
        let pick = |r: &shiftgauge_core::harness::EstimateReport| r.rows.iter().filter(|x| x.seed == seed).cloned().collect::<Vec<_>>();
        assert_eq!(pick(&a), pick(&b));
    }
}

#[test]
fn adapted_model_keeps_the_source_head_and_checkpoint() {
    let report = run_experiment(&small_moons(40.0, &["naive"], &[0, 1])).unwrap();
    for d in &report.seeds {
        assert_eq!(d.status, "ok");
        assert_eq!(d.head_frozen, Some(true));
        assert_eq!(d.source_unchanged, Some(true));
        assert_eq!(d.bounds.violations, 0);
    }
}

fn config_error(text: &str) -> String {
    match ExperimentConfig::from_json(text) {
        Err(Error::Config(msg)) => msg,
        other => panic!("expected a config error, got {other:?}"),
    }
}

const BASE: &str = r#""task": {"kind": "two_moons", "n": 200, "noise_sigma": 0.1}"#;

#[test]
fn config_validation_rejects_bad_input() {
    assert!(config_error(&format!(r#"{{{BASE}, "estimators": ["naive", "oracle"]}}"#)).contains("oracle"));
    assert!(config_error(&format!(r#"{{{BASE}, "estimators": ["naive"], "seedz": [0]}}"#)).contains("seedz"));
    config_error(&format!(r#"{{{BASE}, "estimators": ["naive"], "seeds": []}}"#));
    config_error(&format!(r#"{{{BASE}, "estimators": []}}"#));
    config_error(&format!(r#"{{{BASE}, "estimators": ["naive", "naive"]}}"#));
    config_error(&format!(r#"{{{BASE}, "estimators": ["naive"], "seeds": [1, 1]}}"#));
    config_error(&format!(r#"{{{BASE}, "estimators": ["gde"], "gde_siblings": 1}}"#));
    config_error(&format!(r#"{{{BASE}, "estimators": ["aap"], "model": {{"dropout_p": 0.0}}}}"#));
    config_error(&format!(r#"{{{BASE}, "estimators": ["naive"], "model": {{"hidden": 32}}}}"#));
    config_error(&format!(r#"{{{BASE}, "estimators": ["naive"], "shift": {{"kind": "mean_shift", "scale": 1}}}}"#));
    config_error(&format!(r#"{{{BASE}, "estimators": ["naive"], "pafa": {{"lr": 0.1, "temperature": 2}}}}"#));
    config_error(r#"{"task": {"kind": "spirals", "n": 10}, "estimators": ["naive"]}"#);
    config_error("not json");
}

#[test]
fn config_roundtrips_through_json() {
    let cfg = small_moons(20.0, &["naive", "aap"], &[0, 2]);
    assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
}

#[test]
fn invalid_config_is_rejected_before_training() {
    let mut cfg = small_moons(0.0, &["naive"], &[0]);
    cfg.seeds.clear();
    assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));
}
