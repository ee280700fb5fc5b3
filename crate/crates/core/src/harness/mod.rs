//! Experiment configuration, evaluation and reports.
//!
//! This is the only place that can read hidden target labels: it alone can
//! construct an [`EvaluationGate`].

mod config;
pub mod gradcheck;
mod report;
mod run;
mod sweep;
mod trend;

use std::io::Write;
use std::path::Path;

pub use config::{AdaptationConfig, ExperimentConfig, ModelConfig, ShiftConfig, SourceTrainingConfig, TaskConfig};
pub use report::{BoundCheck, EstimateReport, ReportRow, SeedDiagnostics, SummaryRow, REPORT_COLUMNS};
pub use run::{evaluate_seed, prepare_seed, run_experiment, run_experiment_prepared, AuditCounts, PreparedSeed};
pub use sweep::{parse_grid, sweep_eps, sweep_eps_prepared, ConfigSweep, SweepPoint, SweepReport};
pub use trend::{trend, trend_seed, TrendReport, TrendRow};

use crate::datagen::{io, DataBundle};
use crate::error::Result;
use crate::estimators::label_disagreement;
use crate::model::Classifier;

/// Capability required to read hidden target labels. Only the harness can
/// construct one, so training and estimation code cannot reach the labels.
#[derive(Debug)]
pub struct EvaluationGate {
    _private: (),
}

impl EvaluationGate {
    pub(crate) fn new() -> Self {
        Self { _private: () }
    }
}

/// Fraction of target samples on which `h`'s argmax label differs from the
/// hidden label. Refused while the bundle is in a source-free phase.
pub fn true_target_error<C: Classifier + ?Sized>(h: &C, bundle: &DataBundle) -> Result<f64> {
    let labels = bundle.reveal_target_labels(&EvaluationGate::new())?;
    let predicted = h.eval_labels(bundle.target_view().inputs)?;
    label_disagreement(&predicted, labels)
}

/// `1 − true_target_error`.
pub fn target_accuracy<C: Classifier + ?Sized>(h: &C, bundle: &DataBundle) -> Result<f64> {
    Ok(1.0 - true_target_error(h, bundle)?)
}

/// Writes the target inputs with their hidden labels in the flat dataset
/// format, for checking results with external tools.
pub fn export_target<W: Write>(bundle: &DataBundle, w: W) -> Result<()> {
    let labels = bundle.reveal_target_labels(&EvaluationGate::new())?;
    io::write_dataset(w, bundle.target_view().inputs, labels, bundle.k())
}

/// Writes `bytes` to `path` via a temporary file in the same directory and a
/// rename, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs `f` over `items` on up to `available_parallelism` threads and
/// returns the results in input order.
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}
