//! Per-row results, per-estimator summaries and their CSV/JSON forms.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::AuditCounts;
use super::{write_atomic, ExperimentConfig};
use crate::error::Result;
use crate::metrics::mean_std;
use crate::pafa::LossParts;
use crate::perturb::{FactorSummary, VapTelemetry};

/// Column order of `report.csv`.
pub const REPORT_COLUMNS: [&str; 9] = [
    "task",
    "shift",
    "seed",
    "estimator",
    "estimate",
    "true_error",
    "abs_error",
    "wall_time_s",
    "status",
];

/// One estimator applied to one seed. Numeric fields are `None` when the
/// seed or estimator failed; `status` then carries the error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub shift: String,
    pub seed: u64,
    pub estimator: String,
    pub estimate: Option<f64>,
    pub true_error: Option<f64>,
    pub abs_error: Option<f64>,
    pub wall_time_s: f64,
    pub status: String,
}

impl ReportRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task: String,
    pub shift: String,
    pub estimator: String,
    /// Successful rows aggregated.
    pub n: usize,
    pub mae_mean: f64,
    pub mae_std: f64,
}

/// Range checks over every factor, entropy and estimate a seed produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub checked: usize,
    pub violations: usize,
    /// Up to a few offending values, for diagnosis.
    pub examples: Vec<String>,
}

impl BoundCheck {
    pub(crate) fn check(&mut self, what: &str, value: f64, lo: f64, hi: f64) {
        self.checked += 1;
        if !(value >= lo && value <= hi) {
            self.violations += 1;
            if self.examples.len() < 5 {
                self.examples.push(format!("{what}={value} outside [{lo}, {hi}]"));
            }
        }
    }

    pub fn merge(&mut self, other: &BoundCheck) {
        self.checked += other.checked;
        self.violations += other.violations;
        for e in &other.examples {
            if self.examples.len() < 5 {
                self.examples.push(e.clone());
            }
        }
    }
}

/// Everything recorded about one seed besides the estimator rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedDiagnostics {
    pub seed: u64,
    pub status: String,
    pub source_target_accuracy: Option<f64>,
    pub adapted_target_accuracy: Option<f64>,
    pub final_adaptation_loss: Option<LossParts>,
    /// Head parameters of the adapted model equal the source model's, bitwise.
    pub head_frozen: Option<bool>,
    /// The source checkpoint bytes are unchanged by adaptation and estimation.
    pub source_unchanged: Option<bool>,
    pub audit: Option<AuditCounts>,
    pub bounds: BoundCheck,
    pub aap_factors: Option<FactorSummary>,
    pub vap: Option<VapTelemetry>,
}

/// Result of one experiment configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub config: ExperimentConfig,
    pub rows: Vec<ReportRow>,
    pub summary: Vec<SummaryRow>,
    pub seeds: Vec<SeedDiagnostics>,
}

impl EstimateReport {
    pub(crate) fn new(config: ExperimentConfig, rows: Vec<ReportRow>, seeds: Vec<SeedDiagnostics>) -> Self {
        let summary = summarize(&rows);
        Self {
            config,
            rows,
            summary,
            seeds,
        }
    }

    pub fn all_seeds_failed(&self) -> bool {
        self.seeds.iter().all(|s| s.status != "ok")
    }

    pub fn summary_for(&self, estimator: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|s| s.estimator == estimator)
    }

    pub fn rows_for<'a>(&'a self, estimator: &'a str) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.rows.iter().filter(move |r| r.estimator == estimator)
    }

    pub fn report_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_COLUMNS)?;
        for r in &self.rows {
            w.write_record([
                r.task.clone(),
                r.shift.clone(),
                r.seed.to_string(),
                r.estimator.clone(),
                fmt_opt(r.estimate),
                fmt_opt(r.true_error),
                fmt_opt(r.abs_error),
                r.wall_time_s.to_string(),
                r.status.clone(),
            ])?;
        }
        Ok(w.into_inner().map_err(|e| e.into_error())?)
    }

    pub fn summary_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["task", "shift", "estimator", "n", "mae_mean", "mae_std"])?;
        for s in &self.summary {
            w.write_record([
                s.task.clone(),
                s.shift.clone(),
                s.estimator.clone(),
                s.n.to_string(),
                s.mae_mean.to_string(),
                s.mae_std.to_string(),
            ])?;
        }
        Ok(w.into_inner().map_err(|e| e.into_error())?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `report.csv`, `summary.csv` and `report.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("report.csv"), &self.report_csv()?)?;
        write_atomic(&dir.join("summary.csv"), &self.summary_csv()?)?;
        write_atomic(&dir.join("report.json"), self.to_json().as_bytes())
    }
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Mean and population std of `abs_error` per (task, shift, estimator),
/// over successful rows, in order of first appearance.
pub(crate) fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        let key = (r.task.clone(), r.shift.clone(), r.estimator.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        let errors = groups.entry(key).or_default();
        if let (true, Some(e)) = (r.is_ok(), r.abs_error) {
            errors.push(e);
        }
    }
    order
        .into_iter()
        .map(|key| {
            let errors = &groups[&key];
            let (mae_mean, mae_std) = mean_std(errors).unwrap_or((f64::NAN, f64::NAN));
            SummaryRow {
                task: key.0,
                shift: key.1,
                estimator: key.2,
                n: errors.len(),
                mae_mean,
                mae_std,
            }
        })
        .collect()
}
