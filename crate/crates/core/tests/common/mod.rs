#![allow(dead_code)]

use shiftgauge_core::harness::ExperimentConfig;

/// A small two-moons experiment that trains and adapts in well under a
/// second per seed.
pub fn small_moons(degrees: f64, estimators: &[&str], seeds: &[u64]) -> ExperimentConfig {
    let shift = if degrees == 0.0 {
        serde_json::json!({ "kind": "none" })
    } else {
        serde_json::json!({ "kind": "rotation", "degrees": degrees })
    };
    let text = serde_json::json!({
        "task": { "kind": "two_moons", "n": 300, "noise_sigma": 0.1 },
        "shift": shift,
        "source_training": { "epochs": 40, "lr": 0.05, "momentum": 0.9, "batch": 32, "label_smoothing": 0.1 },
        "pafa": { "epochs": 20, "lr": 0.002, "momentum": 0.9, "batch": 64, "alpha": 0.5, "similarity": "cosine" },
        "estimators": estimators,
        "seeds": seeds,
        "gde_siblings": 2,
        "record_wall_time": false,
    })
    .to_string();
    ExperimentConfig::from_json(&text).expect("fixture config is valid")
}
