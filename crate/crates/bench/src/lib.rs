//! Shared fixtures for the benchmarks: a trained source model and an
//! adapted copy on a shifted task.

use shiftgauge_core::harness::{prepare_seed, ExperimentConfig};
use shiftgauge_core::model::Hypothesis;
use shiftgauge_core::DataBundle;

pub struct Fixture {
    pub bundle: DataBundle,
    pub h_s: Hypothesis,
    pub h_t: Hypothesis,
}

fn build(task: &str, shift: &str) -> Fixture {
    let text = format!(
        r#"{{
            "task": {task},
            "shift": {shift},
            "source_training": {{"epochs": 20, "lr": 0.05, "momentum": 0.9, "batch": 32, "label_smoothing": 0.1}},
            "pafa": {{"epochs": 5, "similarity": "cosine"}},
            "estimators": ["naive"],
            "seeds": [0]
        }}"#
    );
    let cfg = ExperimentConfig::from_json(&text).expect("fixture config");
    let p = prepare_seed(&cfg, 0).expect("fixture prepares");
    Fixture {
        bundle: p.bundle,
        h_s: p.h_s,
        h_t: p.h_t,
    }
}

/// Two-moons rotated by 40 degrees, 600 points.
pub fn moons() -> Fixture {
    build(
        r#"{"kind": "two_moons", "n": 600, "noise_sigma": 0.1}"#,
        r#"{"kind": "rotation", "degrees": 40}"#,
    )
}

/// 8×8 glyph digits with gaussian noise at severity 3.
pub fn glyphs() -> Fixture {
    build(
        r#"{"kind": "glyph_digits", "n_per_class": 60, "jitter": 0.05}"#,
        r#"{"kind": "corruption", "corruption": "gaussian_noise", "severity": 3}"#,
    )
}
