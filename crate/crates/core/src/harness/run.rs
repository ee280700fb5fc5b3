//! The per-seed pipeline: build data, train the source model, adapt, run
//! the estimators and score them through the evaluation gate.

use serde::{Deserialize, Serialize};

use super::report::{BoundCheck, EstimateReport, ReportRow, SeedDiagnostics};
use super::{par_map, target_accuracy, true_target_error, ExperimentConfig};
use crate::datagen::{AccessCounts, Augmenter, DataBundle};
use crate::error::Result;
use crate::estimators::{baseline, run_source_free, Estimate, EstimatorId, EstimatorRun, SourceFreeInputs};
use crate::metrics::entropy;
use crate::model::{train_source, Hypothesis};
use crate::pafa::{adapt, LossTrace};
use crate::perturb::VapTelemetry;
use crate::rng;

/// Source and adapted models for one seed, with the data they came from.
#[derive(Debug)]
pub struct PreparedSeed {
    pub seed: u64,
    pub bundle: DataBundle,
    pub h_s: Hypothesis,
    pub h_t: Hypothesis,
    pub trace: LossTrace,
    /// Access counters right after source training; later reads are
    /// measured against this baseline.
    pub counts_after_source: AccessCounts,
    /// Checkpoint of `h_s` taken right after training.
    pub source_checkpoint: Vec<u8>,
}

/// Data accesses made after the source model was trained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditCounts {
    /// Reads of the source splits after source training.
    pub source_reads: usize,
    /// Reads of the hidden target labels that did not go through the gate
    /// (requests made during a source-free phase; all are refused).
    pub label_reads_outside_gate: usize,
    /// Hidden-label reads through the gate by the harness itself.
    pub gated_label_reads: usize,
}

/// Builds the bundle, trains `h_S` and adapts `h_T` for one seed.
/// Adaptation runs inside a source-free phase.
pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedSeed> {
    let bundle = cfg.build_bundle(seed)?;
    let train_cfg = cfg
        .source_training
        .resolve(cfg.model.dropout_p, rng::derive(seed, "harness.source", 0));
    let (h_s, _) = train_source(&bundle, &train_cfg)?;
    let counts_after_source = bundle.access_counts();
    let source_checkpoint = h_s.to_bytes();
    let (h_t, trace) = {
        let _phase = bundle.source_free_phase();
        let view = bundle.target_view();
        adapt(&h_s, view.inputs, view.kind, &cfg.pafa.resolve(rng::derive(seed, "harness.pafa", 0)))?
    };
    Ok(PreparedSeed {
        seed,
        bundle,
        h_s,
        h_t,
        trace,
        counts_after_source,
        source_checkpoint,
    })
}

fn source_free_runs(cfg: &ExperimentConfig, p: &PreparedSeed) -> Result<Vec<(EstimatorId, Result<EstimatorRun>)>> {
    let _phase = p.bundle.source_free_phase();
    let view = p.bundle.target_view();
    let augmenter = Augmenter::fit(view.inputs, view.kind)?;
    let inputs = SourceFreeInputs {
        h_s: &p.h_s,
        h_t: &p.h_t,
        view,
        augmenter: &augmenter,
        spec: &cfg.perturb,
        seed: rng::derive(p.seed, "harness.estimators", 0),
    };
    Ok(cfg
        .estimators
        .iter()
        .filter(|id| id.is_source_free())
        .map(|&id| (id, run_source_free(id, &inputs)))
        .collect())
}

fn baseline_run(cfg: &ExperimentConfig, p: &PreparedSeed, id: EstimatorId) -> Result<Estimate> {
    match id {
        EstimatorId::Doc => baseline::est_doc(&p.h_s, &p.bundle),
        EstimatorId::Gde => {
            let mut siblings = vec![p.h_s.clone()];
            for i in 1..cfg.gde_siblings {
                let sib_cfg = cfg
                    .source_training
                    .resolve(cfg.model.dropout_p, rng::derive(p.seed, "harness.gde", i as u64));
                siblings.push(train_source(&p.bundle, &sib_cfg)?.0);
            }
            baseline::est_gde(&siblings, p.bundle.target_view().inputs)
        }
        other => unreachable!("{other} is source-free"),
    }
}

fn check_bounds(p: &PreparedSeed, runs: &[(EstimatorId, Result<EstimatorRun>)], bounds: &mut BoundCheck) -> Result<()> {
    let x = p.bundle.target_view().inputs;
    let ln_k = (p.bundle.k() as f64).ln();
    // Entropies are sums of non-negative terms; allow rounding at ln K.
    for (name, h) in [("entropy(h_s)", &p.h_s), ("entropy(h_t)", &p.h_t)] {
        for row in h.predict(x)?.probs.row_iter() {
            bounds.check(name, entropy(row)?, 0.0, ln_k + 1e-12);
        }
    }
    for (id, run) in runs {
        let Ok(run) = run else { continue };
        bounds.check(id.as_str(), run.estimate.value, 0.0, 1.0);
        if let Some(f) = &run.factors {
            f.c_unc.iter().for_each(|&v| bounds.check("c_unc", v, 0.0, 0.5));
            f.c_div.iter().for_each(|&v| bounds.check("c_div(js)", v, 0.0, 1.0));
        }
    }
    Ok(())
}

/// Runs every configured estimator on a prepared seed and scores it.
pub fn evaluate_seed(cfg: &ExperimentConfig, p: &PreparedSeed) -> (Vec<ReportRow>, SeedDiagnostics) {
    let (task, shift) = (cfg.task.name(), cfg.shift.label());
    let mut diag = SeedDiagnostics {
        seed: p.seed,
        status: "ok".into(),
        ..Default::default()
    };
    let outcome = (|| -> Result<Vec<ReportRow>> {
        let mut runs = source_free_runs(cfg, p)?;
        for &id in cfg.estimators.iter().filter(|id| !id.is_source_free()) {
            let run = baseline_run(cfg, p, id).map(|estimate| EstimatorRun {
                estimate,
                factors: None,
                telemetry: None,
            });
            runs.push((id, run));
        }
        runs.sort_by_key(|(id, _)| cfg.estimators.iter().position(|e| e == id));

        let after = p.bundle.access_counts();
        diag.audit = Some(AuditCounts {
            source_reads: after.source_reads - p.counts_after_source.source_reads,
            label_reads_outside_gate: after.source_free_label_reads,
            gated_label_reads: after.gated_label_reads,
        });
        let true_error = true_target_error(&p.h_s, &p.bundle)?;
        diag.source_target_accuracy = Some(1.0 - true_error);
        diag.adapted_target_accuracy = Some(target_accuracy(&p.h_t, &p.bundle)?);
        diag.final_adaptation_loss = p.trace.last().copied();
        diag.head_frozen = Some(p.h_s.head() == p.h_t.head());
        diag.source_unchanged = Some(p.h_s.to_bytes() == p.source_checkpoint);
        check_bounds(p, &runs, &mut diag.bounds)?;

        let mut vap = None::<VapTelemetry>;
        let mut rows = Vec::with_capacity(runs.len());
        for (id, run) in runs {
            let row = match run {
                Ok(run) => {
                    if let Some(f) = &run.factors {
                        diag.aap_factors = Some(f.summary());
                    }
                    if let Some(t) = run.telemetry {
                        vap.get_or_insert_with(VapTelemetry::default).absorb(t);
                    }
                    let v = run.estimate.value;
                    ReportRow {
                        task: task.clone(),
                        shift: shift.clone(),
                        seed: p.seed,
                        estimator: id.to_string(),
                        estimate: Some(v),
                        true_error: Some(true_error),
                        abs_error: Some((v - true_error).abs()),
                        wall_time_s: if cfg.record_wall_time { run.estimate.wall_time } else { 0.0 },
                        status: "ok".into(),
                    }
                }
                Err(e) => failed_row(&task, &shift, p.seed, id, &e.to_string()),
            };
            rows.push(row);
        }
        diag.vap = vap;
        Ok(rows)
    })();
    match outcome {
        Ok(rows) => (rows, diag),
        Err(e) => {
            diag.status = format!("error: {e}");
            (failed_rows(cfg, p.seed, &e.to_string()), diag)
        }
    }
}

fn failed_row(task: &str, shift: &str, seed: u64, id: EstimatorId, msg: &str) -> ReportRow {
    ReportRow {
        task: task.into(),
        shift: shift.into(),
        seed,
        estimator: id.to_string(),
        estimate: None,
        true_error: None,
        abs_error: None,
        wall_time_s: 0.0,
        status: format!("error: {msg}"),
    }
}

fn failed_rows(cfg: &ExperimentConfig, seed: u64, msg: &str) -> Vec<ReportRow> {
    let (task, shift) = (cfg.task.name(), cfg.shift.label());
    cfg.estimators.iter().map(|&id| failed_row(&task, &shift, seed, id, msg)).collect()
}

/// Scores already prepared seeds; `prepared[i]` belongs to `cfg.seeds[i]`.
/// Seeds whose preparation failed appear as failed rows.
pub fn run_experiment_prepared(cfg: &ExperimentConfig, prepared: &[Result<PreparedSeed>]) -> EstimateReport {
    let items: Vec<(u64, &Result<PreparedSeed>)> = cfg.seeds.iter().copied().zip(prepared).collect();
    let outcomes = par_map(&items, |(seed, p)| match p {
        Ok(p) => evaluate_seed(cfg, p),
        Err(e) => {
            let diag = SeedDiagnostics {
                seed: *seed,
                status: format!("error: {e}"),
                ..Default::default()
            };
            (failed_rows(cfg, *seed, &e.to_string()), diag)
        }
    });
    let (rows, seeds): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    EstimateReport::new(cfg.clone(), rows.concat(), seeds)
}

/// Runs the full pipeline for every configured seed. Per-seed failures are
/// recorded in the report rather than returned.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<EstimateReport> {
    cfg.validate()?;
    let prepared = par_map(&cfg.seeds, |&seed| prepare_seed(cfg, seed));
    Ok(run_experiment_prepared(cfg, &prepared))
}
