//! Numerical verification: finite-difference gradients of the MLP loss and
//! brute-force checks of the VAP direction.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, PrimitiveFault, Tensor, Var};
use crate::error::Result;
use crate::model::{smoothed_targets, soft_cross_entropy, Hypothesis, LinearModel, Mode};
use crate::perturb::{kl_under, vap, PerturbSpec};
use crate::rng;

pub const MAX_REL_ERROR: f64 = 1e-4;
pub const MAX_NORM_DEVIATION: f64 = 1e-5;
pub const MAX_ANGLE_DEG: f64 = 15.0;
/// Relative errors are taken against `max(|analytic|, |numeric|, REL_FLOOR)`
/// so that coordinates with vanishing gradient are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub coords: usize,
    pub step: f64,
    pub vap_pairs: usize,
    pub angle_trials: usize,
    pub directions: usize,
    pub kl_trials: usize,
    pub seed: u64,
    /// Corrupts one backward rule; used to confirm the checker fails.
    #[serde(skip)]
    pub fault: Option<PrimitiveFault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            coords: 100,
            step: 1e-5,
            vap_pairs: 100,
            angle_trials: 20,
            directions: 720,
            kl_trials: 100,
            seed: 0,
            fault: None,
        }
    }
}

/// The worst coordinate of the finite-difference check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorstCoordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<WorstCoordinate>,
    /// Largest `|‖r‖ − ε| / ε` over all VAP rows.
    pub vap_norm_max_rel_dev: f64,
    pub vap_rows_checked: usize,
    /// Largest angle between VAP and the brute-force KL maximizer.
    pub vap_max_angle_deg: f64,
    pub adv_kl_mean: f64,
    pub rnd_kl_mean: f64,
    pub elapsed_s: f64,
}

impl GradcheckReport {
    pub fn gradients_pass(&self) -> bool {
        self.max_rel_error <= MAX_REL_ERROR
    }

    pub fn vap_pass(&self) -> bool {
        self.vap_norm_max_rel_dev <= MAX_NORM_DEVIATION
            && self.vap_max_angle_deg <= MAX_ANGLE_DEG
            && self.adv_kl_mean >= self.rnd_kl_mean
    }

    pub fn passed(&self) -> bool {
        self.gradients_pass() && self.vap_pass()
    }
}

fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

fn mlp_loss(
    h: &Hypothesis,
    x: &Tensor,
    targets: &Tensor,
    fault: Option<PrimitiveFault>,
    backward: bool,
) -> Result<(f64, Graph, Vec<Var>)> {
    let mut g = Graph::new();
    if let Some(f) = fault {
        g.inject_fault(f);
    }
    let vars = if backward { h.params().bind(&mut g) } else { h.params().bind_constant(&mut g) };
    let xv = g.constant(x.clone());
    let logits = h.forward(&mut g, xv, &vars, Mode::Eval)?.logits;
    let loss = soft_cross_entropy(&mut g, targets.clone(), logits)?;
    let value = g.value(loss)?.item()?;
    if backward {
        g.backward(loss)?;
    }
    Ok((value, g, vars))
}

/// Central finite differences on `coords` random parameter coordinates of
/// a cross-entropy loss through the 2×64 ReLU MLP.
fn check_mlp(opts: &GradcheckOptions, report: &mut GradcheckReport) -> Result<()> {
    let mut rng = rng::stream(opts.seed, "gradcheck.mlp", 0);
    let (dim, k, batch) = (4, 3, 16);
    let h = Hypothesis::new(dim, k, 0.0, rng::derive(opts.seed, "gradcheck.init", 0))?;
    let x = gaussian_matrix(batch, dim, 1.0, &mut rng);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..k)).collect();
    let targets = smoothed_targets(&labels, k, 0.1);
    let (_, graph, vars) = mlp_loss(&h, &x, &targets, opts.fault, true)?;

    let sizes: Vec<usize> = h.params().iter().map(|p| p.value.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut max_rel = 0.0f64;
    for _ in 0..opts.coords {
        let mut flat = rng.random_range(0..total);
        let pi = sizes.iter().position(|&s| {
            if flat < s {
                true
            } else {
                flat -= s;
                false
            }
        });
        let pi = pi.expect("index within total");
        let analytic = graph.grad(vars[pi]).map_or(0.0, |g| g[flat]);
        let eval_at = |delta: f64| -> Result<f64> {
            let mut hp = h.clone();
            let p = hp.params_mut().iter_mut().nth(pi).expect("param index");
            p.value.data_mut()[flat] += delta;
            Ok(mlp_loss(&hp, &x, &targets, None, false)?.0)
        };
        let numeric = (eval_at(opts.step)? - eval_at(-opts.step)?) / (2.0 * opts.step);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel >= max_rel {
            max_rel = rel;
            report.worst = Some(WorstCoordinate {
                param: h.params().iter().nth(pi).expect("param index").name.clone(),
                index: flat,
                analytic,
                numeric,
            });
        }
    }
    report.coords_checked = opts.coords;
    report.max_rel_error = max_rel;
    Ok(())
}

/// VAP norms over random MLPs and inputs, plus the KL of adversarial versus
/// random directions of the same radius.
fn check_vap_norms(opts: &GradcheckOptions, report: &mut GradcheckReport) -> Result<()> {
    let mut rng = rng::stream(opts.seed, "gradcheck.vap", 0);
    let spec = PerturbSpec::default();
    let mut worst = 0.0f64;
    let mut rows = 0;
    for pair in 0..opts.vap_pairs {
        let dim = rng.random_range(2..=8);
        let k = rng.random_range(2..=5);
        let h = Hypothesis::new(dim, k, 0.1, rng::derive(opts.seed, "gradcheck.vap.model", pair as u64))?;
        let x = gaussian_matrix(4, dim, 1.5, &mut rng);
        let eps: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..3.0)).collect();
        let (r, _) = vap(&h, &x, &eps, &spec, rng::derive(opts.seed, "gradcheck.vap.start", pair as u64))?;
        for (row, e) in r.row_iter().zip(&eps) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            worst = worst.max((norm - e).abs() / e);
            rows += 1;
        }
    }
    report.vap_norm_max_rel_dev = worst;
    report.vap_rows_checked = rows;

    let (mut adv, mut rnd) = (0.0, 0.0);
    for trial in 0..opts.kl_trials {
        let h = Hypothesis::new(2, 2, 0.1, rng::derive(opts.seed, "gradcheck.kl.model", trial as u64))?;
        let x = gaussian_matrix(1, 2, 1.0, &mut rng);
        let eps = 0.5;
        let (r, _) = vap(&h, &x, &[eps], &spec, rng::derive(opts.seed, "gradcheck.kl.start", trial as u64))?;
        let v = gaussian_matrix(1, 2, 1.0, &mut rng);
        let n = v.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let random = Tensor::matrix(1, 2, v.data().iter().map(|a| a * eps / n).collect())?;
        adv += kl_under(&h, &x, &r)?[0];
        rnd += kl_under(&h, &x, &random)?[0];
    }
    report.adv_kl_mean = adv / opts.kl_trials.max(1) as f64;
    report.rnd_kl_mean = rnd / opts.kl_trials.max(1) as f64;
    Ok(())
}

/// Angle between the VAP direction of a 2-input logistic model and the best
/// of `directions` evenly spaced directions by exhaustive KL evaluation.
fn check_vap_angle(opts: &GradcheckOptions, report: &mut GradcheckReport) -> Result<()> {
    let mut rng = rng::stream(opts.seed, "gradcheck.angle", 0);
    let spec = PerturbSpec::default();
    let mut worst = 0.0f64;
    for trial in 0..opts.angle_trials {
        let model = LinearModel::new(gaussian_matrix(2, 2, 2.0, &mut rng), vec![rng.random_range(-1.0..1.0), 0.0])?;
        let x = gaussian_matrix(1, 2, 1.0, &mut rng);
        let eps = rng.random_range(0.2..1.0);
        let (r, _) = vap(&model, &x, &[eps], &spec, rng::derive(opts.seed, "gradcheck.angle.start", trial as u64))?;
        let d = r.row(0);
        let dirs: Vec<[f64; 2]> = (0..opts.directions)
            .map(|j| {
                let t = std::f64::consts::TAU * j as f64 / opts.directions as f64;
                [eps * t.cos(), eps * t.sin()]
            })
            .collect();
        let x_rep = Tensor::from_rows(&vec![x.row(0).to_vec(); dirs.len()])?;
        let shifts = Tensor::from_rows(&dirs)?;
        let kls = kl_under(&model, &x_rep, &shifts)?;
        let best = (0..dirs.len()).fold(0, |b, j| if kls[j] > kls[b] { j } else { b });
        let cos = (d[0] * dirs[best][0] + d[1] * dirs[best][1]) / (eps * eps);
        worst = worst.max(cos.clamp(-1.0, 1.0).acos().to_degrees());
    }
    report.vap_max_angle_deg = worst;
    Ok(())
}

/// Runs the finite-difference suite and the VAP oracles.
pub fn gradcheck_with(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let started = Instant::now();
    let mut report = GradcheckReport {
        coords_checked: 0,
        max_rel_error: 0.0,
        worst: None,
        vap_norm_max_rel_dev: 0.0,
        vap_rows_checked: 0,
        vap_max_angle_deg: 0.0,
        adv_kl_mean: 0.0,
        rnd_kl_mean: 0.0,
        elapsed_s: 0.0,
    };
    check_mlp(opts, &mut report)?;
    check_vap_norms(opts, &mut report)?;
    check_vap_angle(opts, &mut report)?;
    report.elapsed_s = started.elapsed().as_secs_f64();
    Ok(report)
}

pub fn gradcheck() -> Result<GradcheckReport> {
    gradcheck_with(&GradcheckOptions::default())
}
