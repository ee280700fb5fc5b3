//! Fixed-radius adversarial estimator over a grid of radii.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{par_map, prepare_seed, true_target_error, write_atomic, ExperimentConfig, PreparedSeed};
use crate::error::{Error, Result};
use crate::estimators::est_adv;
use crate::metrics::mean_std;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub eps: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
}

/// Per-configuration curve: MAE over that configuration's seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigSweep {
    pub task: String,
    pub shift: String,
    pub points: Vec<SweepPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// Macro curve: `mae_mean` averages the per-configuration MAEs;
    /// `mae_std` is the std over seed positions of the per-seed macro error.
    pub points: Vec<SweepPoint>,
    pub per_config: Vec<ConfigSweep>,
}

impl SweepReport {
    pub fn sweep_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["eps", "mae_mean", "mae_std"])?;
        for p in &self.points {
            w.write_record([p.eps.to_string(), p.mae_mean.to_string(), p.mae_std.to_string()])?;
        }
        Ok(w.into_inner().map_err(|e| e.into_error())?)
    }

    pub fn per_config_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["task", "shift", "eps", "mae_mean", "mae_std"])?;
        for c in &self.per_config {
            for p in &c.points {
                w.write_record([
                    c.task.clone(),
                    c.shift.clone(),
                    p.eps.to_string(),
                    p.mae_mean.to_string(),
                    p.mae_std.to_string(),
                ])?;
            }
        }
        Ok(w.into_inner().map_err(|e| e.into_error())?)
    }

    /// Writes `sweep.csv` and `sweep_by_config.csv` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("sweep.csv"), &self.sweep_csv()?)?;
        write_atomic(&dir.join("sweep_by_config.csv"), &self.per_config_csv()?)
    }
}

/// Parses `start:stop:step` (inclusive of `stop` up to rounding) or a
/// comma-separated list such as `0,0.5,1,1.5,2,3`.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("bad number `{s}` in grid `{text}`")))
    };
    let grid = if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        let [start, stop, step] = parts[..] else {
            return Err(Error::Config(format!("grid `{text}` is not start:stop:step")));
        };
        let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
        if !(step > 0.0) || !(stop >= start) {
            return Err(Error::Config(format!("grid `{text}` needs step > 0 and stop >= start")));
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| start + i as f64 * step).collect()
    } else {
        text.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    check_grid(&grid)?;
    Ok(grid)
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("eps grid is empty".into()));
    }
    if grid.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
        return Err(Error::Config("eps grid values must be finite and non-negative".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("eps grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Absolute errors of `est_adv` for one seed at every grid radius. The same
/// VAP starting stream is used at every radius.
fn seed_errors(cfg: &ExperimentConfig, p: &PreparedSeed, grid: &[f64]) -> Result<Vec<f64>> {
    let truth = true_target_error(&p.h_s, &p.bundle)?;
    let _phase = p.bundle.source_free_phase();
    let x = p.bundle.target_view().inputs;
    let seed = rng::derive(p.seed, "harness.sweep", 0);
    grid.iter()
        .map(|&eps| Ok((est_adv(&p.h_s, &p.h_t, x, eps, &cfg.perturb, seed)?.0.value - truth).abs()))
        .collect()
}

/// Sweeps already prepared seeds. Every configuration must have the same
/// number of seeds so per-seed macro errors line up.
pub fn sweep_eps_prepared(suite: &[(&ExperimentConfig, &[&PreparedSeed])], grid: &[f64]) -> Result<SweepReport> {
    check_grid(grid)?;
    let Some(n_seeds) = suite.first().map(|(_, p)| p.len()) else {
        return Err(Error::Config("sweep needs at least one configuration".into()));
    };
    if n_seeds == 0 || suite.iter().any(|(_, p)| p.len() != n_seeds) {
        return Err(Error::Config("every configuration in a sweep needs the same, non-zero seed count".into()));
    }
    // errors[c][s][g]
    let mut errors = Vec::with_capacity(suite.len());
    for (cfg, prepared) in suite {
        let per_seed = par_map(prepared, |p| seed_errors(cfg, p, grid));
        errors.push(per_seed.into_iter().collect::<Result<Vec<_>>>()?);
    }
    let per_config = suite
        .iter()
        .zip(&errors)
        .map(|((cfg, _), e)| ConfigSweep {
            task: cfg.task.name(),
            shift: cfg.shift.label(),
            points: grid
                .iter()
                .enumerate()
                .map(|(g, &eps)| {
                    let column: Vec<f64> = e.iter().map(|s| s[g]).collect();
                    let (mae_mean, mae_std) = mean_std(&column).expect("non-empty");
                    SweepPoint { eps, mae_mean, mae_std }
                })
                .collect(),
        })
        .collect::<Vec<_>>();
    let points = grid
        .iter()
        .enumerate()
        .map(|(g, &eps)| {
            let per_seed_macro: Vec<f64> = (0..n_seeds)
                .map(|s| errors.iter().map(|c| c[s][g]).sum::<f64>() / errors.len() as f64)
                .collect();
            let mae_mean = per_config.iter().map(|c| c.points[g].mae_mean).sum::<f64>() / per_config.len() as f64;
            let (_, mae_std) = mean_std(&per_seed_macro).expect("non-empty");
            SweepPoint { eps, mae_mean, mae_std }
        })
        .collect();
    Ok(SweepReport { points, per_config })
}

/// Trains and adapts every seed of every configuration, then sweeps.
pub fn sweep_eps(cfgs: &[ExperimentConfig], grid: &[f64]) -> Result<SweepReport> {
    check_grid(grid)?;
    let mut prepared = Vec::with_capacity(cfgs.len());
    for cfg in cfgs {
        cfg.validate()?;
        let seeds = par_map(&cfg.seeds, |&s| prepare_seed(cfg, s));
        prepared.push(seeds.into_iter().collect::<Result<Vec<_>>>()?);
    }
    let refs: Vec<Vec<&PreparedSeed>> = prepared.iter().map(|p| p.iter().collect()).collect();
    let suite: Vec<(&ExperimentConfig, &[&PreparedSeed])> = cfgs.iter().zip(&refs).map(|(c, p)| (c, &p[..])).collect();
    sweep_eps_prepared(&suite, grid)
}
