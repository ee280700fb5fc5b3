//! Estimator values tracked while adaptation progresses.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{par_map, true_target_error, write_atomic, ExperimentConfig};
use crate::error::{Error, Result};
use crate::estimators::{est_aap, est_adv, est_naive};
use crate::model::{train_source, Hypothesis};
use crate::pafa::adapt_with;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub seed: u64,
    pub epoch: usize,
    pub est_naive: f64,
    pub est_adv: f64,
    pub est_aap: f64,
    /// True target error of the source model; constant per seed.
    pub true_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub rows: Vec<TrendRow>,
}

impl TrendReport {
    pub fn seed_rows(&self, seed: u64) -> impl Iterator<Item = &TrendRow> {
        self.rows.iter().filter(move |r| r.seed == seed)
    }

    pub fn trend_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["seed", "epoch", "est_naive", "est_adv", "est_aap", "true_error"])?;
        for r in &self.rows {
            w.write_record([
                r.seed.to_string(),
                r.epoch.to_string(),
                r.est_naive.to_string(),
                r.est_adv.to_string(),
                r.est_aap.to_string(),
                r.true_error.to_string(),
            ])?;
        }
        Ok(w.into_inner().map_err(|e| e.into_error())?)
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("trend.csv"), &self.trend_csv()?)
    }
}

/// Adapts one seed, evaluating the source-free estimators on a snapshot
/// of `h_T` at epoch 0, every `every` epochs and at the final epoch. The
/// adaptation itself is identical to the one `run_experiment` performs.
pub fn trend_seed(cfg: &ExperimentConfig, seed: u64, every: usize) -> Result<Vec<TrendRow>> {
    if every == 0 {
        return Err(Error::Config("trend stride must be at least 1".into()));
    }
    let bundle = cfg.build_bundle(seed)?;
    let train_cfg = cfg
        .source_training
        .resolve(cfg.model.dropout_p, rng::derive(seed, "harness.source", 0));
    let (h_s, _) = train_source(&bundle, &train_cfg)?;
    let true_error = true_target_error(&h_s, &bundle)?;

    let _phase = bundle.source_free_phase();
    let view = bundle.target_view();
    let epochs = cfg.pafa.epochs;
    let snapshot = |epoch: usize, h_t: &Hypothesis| -> Result<TrendRow> {
        let est_seed = rng::derive(seed, "harness.trend", epoch as u64);
        Ok(TrendRow {
            seed,
            epoch,
            est_naive: est_naive(&h_s, h_t, view.inputs)?.value,
            est_adv: est_adv(&h_s, h_t, view.inputs, cfg.perturb.eps0, &cfg.perturb, est_seed)?.0.value,
            est_aap: est_aap(&h_s, h_t, &view, &cfg.perturb, est_seed)?.0.value,
            true_error,
        })
    };
    let mut rows = vec![snapshot(0, &h_s)?];
    adapt_with(
        &h_s,
        view.inputs,
        view.kind,
        &cfg.pafa.resolve(rng::derive(seed, "harness.pafa", 0)),
        |epoch, h_t| {
            if epoch % every == 0 || epoch == epochs {
                rows.push(snapshot(epoch, h_t)?);
            }
            Ok(())
        },
    )?;
    Ok(rows)
}

/// Runs [`trend_seed`] for every configured seed.
pub fn trend(cfg: &ExperimentConfig, every: usize) -> Result<TrendReport> {
    cfg.validate()?;
    if every == 0 {
        return Err(Error::Config("trend stride must be at least 1".into()));
    }
    let per_seed = par_map(&cfg.seeds, |&seed| trend_seed(cfg, seed, every));
    Ok(TrendReport {
        rows: per_seed.into_iter().collect::<Result<Vec<_>>>()?.concat(),
    })
}
