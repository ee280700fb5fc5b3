//! Input perturbations and the per-sample scaling of the adversarial radius.
//!
//! [`vap`] approximates the KL-maximizing perturbation of a fixed radius by
//! power iteration on input gradients. [`adaptive_eps`] scales the radius
//! per sample by class complexity, the target/source spread ratio, the
//! Monte-Carlo-dropout uncertainty of the adapted model, and the
//! source/target prediction divergence.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, Graph, Tensor};
use crate::datagen::{Augmenter, TargetView};
use crate::error::{invalid, Error, Result};
use crate::metrics::{js_divergence_base2, mean_std};
use crate::model::{Classifier, Hypothesis};
use crate::rng;

/// Smallest source channel std for which the density ratio is defined.
pub const SOURCE_STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbSpec {
    pub eps0: f64,
    /// Probe radius of the power iteration.
    pub xi: f64,
    pub power_iters: usize,
    /// Monte-Carlo dropout passes per sample.
    pub mc_samples: usize,
    /// Strength of the random views used by the `rnd` estimators.
    pub rnd_strength: f64,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        Self {
            eps0: 1.0,
            xi: 1e-6,
            power_iters: 1,
            mc_samples: 10,
            rnd_strength: 1.0,
        }
    }
}

impl PerturbSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps0 >= 0.0) || !self.eps0.is_finite() {
            return Err(invalid(format!("eps0 must be non-negative, got {}", self.eps0)));
        }
        if !(self.xi > 0.0) || !self.xi.is_finite() {
            return Err(invalid(format!("xi must be positive, got {}", self.xi)));
        }
        if self.power_iters < 1 {
            return Err(invalid("power_iters must be at least 1"));
        }
        if self.mc_samples < 2 {
            return Err(invalid(format!("mc_samples must be at least 2, got {}", self.mc_samples)));
        }
        if !(self.rnd_strength >= 0.0) || !self.rnd_strength.is_finite() {
            return Err(invalid(format!("rnd_strength must be non-negative, got {}", self.rnd_strength)));
        }
        Ok(())
    }
}

/// Per-sample perturbation radii and the factors they are built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveFactors {
    pub c_cls: f64,
    pub c_den: f64,
    pub c_unc: Vec<f64>,
    pub c_div: Vec<f64>,
    /// `c_unc + c_div`.
    pub c_adj_unc: Vec<f64>,
    /// `eps0 · c_cls · c_den · c_adj_unc`.
    pub eps: Vec<f64>,
}

/// Distribution summary of [`AdaptiveFactors`] for reports.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FactorSummary {
    pub c_cls: f64,
    pub c_den: f64,
    pub c_unc_mean: f64,
    pub c_unc_std: f64,
    pub c_unc_min: f64,
    pub c_unc_max: f64,
    pub c_div_mean: f64,
    pub c_div_std: f64,
    pub c_div_min: f64,
    pub c_div_max: f64,
    pub eps_mean: f64,
    pub eps_std: f64,
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(*x), hi.max(*x)))
}

impl AdaptiveFactors {
    pub fn summary(&self) -> FactorSummary {
        let (c_unc_mean, c_unc_std) = mean_std(&self.c_unc).unwrap_or_default();
        let (c_div_mean, c_div_std) = mean_std(&self.c_div).unwrap_or_default();
        let (eps_mean, eps_std) = mean_std(&self.eps).unwrap_or_default();
        let (c_unc_min, c_unc_max) = min_max(&self.c_unc);
        let (c_div_min, c_div_max) = min_max(&self.c_div);
        FactorSummary {
            c_cls: self.c_cls,
            c_den: self.c_den,
            c_unc_mean,
            c_unc_std,
            c_unc_min,
            c_unc_max,
            c_div_mean,
            c_div_std,
            c_div_min,
            c_div_max,
            eps_mean,
            eps_std,
        }
    }
}

/// Counters describing how VAP directions were obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VapTelemetry {
    /// Rows whose input gradient vanished, so the random start direction
    /// was used instead.
    pub zero_grad_fallbacks: usize,
    /// Rows where the negated power-iteration direction gave the larger KL.
    pub sign_flips: usize,
}

impl VapTelemetry {
    pub fn absorb(&mut self, other: VapTelemetry) {
        self.zero_grad_fallbacks += other.zero_grad_fallbacks;
        self.sign_flips += other.sign_flips;
    }
}

/// A strong-style random view of `x` whose magnitude grows with `strength`.
pub fn random_perturbation(augmenter: &Augmenter, x: &Tensor, strength: f64, seed: u64) -> Result<Tensor> {
    augmenter.random_view(x, strength, seed)
}

fn normalize_rows(data: &mut [f64], cols: usize) -> Vec<bool> {
    data.chunks_mut(cols)
        .map(|row| {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 && norm.is_finite() {
                row.iter_mut().for_each(|v| *v /= norm);
                true
            } else {
                false
            }
        })
        .collect()
}

fn log_softmax_rows(logits: &Tensor) -> Vec<f64> {
    let k = logits.cols().max(1);
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let lse = crate::autodiff::log_sum_exp(row);
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Row-wise `KL(softmax(clean) ‖ softmax(perturbed))` in nats.
pub fn kl_rows(clean_logits: &Tensor, perturbed_logits: &Tensor) -> Vec<f64> {
    let k = clean_logits.cols().max(1);
    let lp = log_softmax_rows(clean_logits);
    let lq = log_softmax_rows(perturbed_logits);
    lp.chunks(k)
        .zip(lq.chunks(k))
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.exp() * (x - y))
                .sum::<f64>()
                .max(0.0)
        })
        .collect()
}

/// Row-wise KL between the model's predictions on `x` and on `x + r`.
pub fn kl_under<C: Classifier + ?Sized>(model: &C, x: &Tensor, r: &Tensor) -> Result<Vec<f64>> {
    let clean = model.eval_logits(x)?;
    let shifted = add(x, r)?;
    Ok(kl_rows(&clean, &model.eval_logits(&shifted)?))
}

fn add(x: &Tensor, r: &Tensor) -> Result<Tensor> {
    if x.shape() != r.shape() {
        return Err(Error::ShapeMismatch {
            op: "perturb add",
            lhs: x.shape().to_vec(),
            rhs: r.shape().to_vec(),
        });
    }
    Tensor::new(x.shape().to_vec(), x.data().iter().zip(r.data()).map(|(a, b)| a + b).collect())
}

/// Virtual adversarial perturbation with a per-row radius `eps[i]`.
///
/// Starting from a random unit direction per row, each power iteration
/// replaces the direction by the normalized input gradient of
/// `KL(model(x) ‖ model(x + xi·d))`. Because that objective is locally an
/// even function of `d`, the final direction is oriented towards whichever
/// of `±d` yields the larger KL at the requested radius. Rows with a
/// vanishing gradient keep their random direction and are counted in the
/// telemetry. Every returned row has Euclidean norm `eps[i]`.
pub fn vap<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    eps: &[f64],
    spec: &PerturbSpec,
    seed: u64,
) -> Result<(Tensor, VapTelemetry)> {
    spec.validate()?;
    if x.shape().len() != 2 || x.cols() != model.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "vap",
            lhs: x.shape().to_vec(),
            rhs: vec![model.input_dim()],
        });
    }
    if eps.len() != x.rows() {
        return Err(Error::LengthMismatch(eps.len(), x.rows()));
    }
    if let Some(e) = eps.iter().find(|e| !(**e >= 0.0) || !e.is_finite()) {
        return Err(invalid(format!("perturbation radius must be non-negative, got {e}")));
    }
    let (n, dim) = (x.rows(), x.cols());
    let mut telemetry = VapTelemetry::default();
    if n == 0 || eps.iter().all(|e| *e == 0.0) {
        return Ok((Tensor::zeros(x.shape().to_vec()), telemetry));
    }

    let mut rng = rng::stream(seed, "vap.start", 0);
    let mut d: Vec<f64> = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize_rows(&mut d, dim);
    let clean = model.eval_logits(x)?;

    let mut ok = vec![true; n];
    for _ in 0..spec.power_iters {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let probe = Tensor::new(vec![n, dim], d.iter().map(|v| v * spec.xi).collect())?;
        let rv = g.leaf(probe, true);
        let xr = g.add(xv, rv)?;
        let logits = model.logits_on(&mut g, xr)?;
        let kl = g.kl_from_logits(&clean, logits)?;
        g.backward(kl)?;
        let mut grad = g.grad(rv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n * dim]);
        let usable = normalize_rows(&mut grad, dim);
        for (i, good) in usable.iter().enumerate() {
            if *good {
                d[i * dim..(i + 1) * dim].copy_from_slice(&grad[i * dim..(i + 1) * dim]);
            }
            ok[i] = *good;
        }
    }
    telemetry.zero_grad_fallbacks = ok.iter().filter(|v| !**v).count();

    let scaled = |sign: f64| -> Result<Tensor> {
        let data = d
            .chunks(dim)
            .zip(eps)
            .flat_map(|(row, e)| row.iter().map(move |v| sign * e * v))
            .collect();
        Tensor::new(vec![n, dim], data)
    };
    let plus = scaled(1.0)?;
    let minus = scaled(-1.0)?;
    let kl_plus = kl_rows(&clean, &model.eval_logits(&add(x, &plus)?)?);
    let kl_minus = kl_rows(&clean, &model.eval_logits(&add(x, &minus)?)?);
    let mut out = plus;
    for i in 0..n {
        if kl_minus[i] > kl_plus[i] {
            out.row_mut(i).copy_from_slice(minus.row(i));
            telemetry.sign_flips += 1;
        }
    }
    Ok((out, telemetry))
}

/// Per-row population std, over `passes`, of the probability assigned to
/// the class that is most probable on average. Lies in `[0, 0.5]`.
pub fn c_unc_from_passes(passes: &[Tensor]) -> Result<Vec<f64>> {
    let first = passes.first().ok_or(Error::Empty("MC dropout passes"))?;
    if passes.len() < 2 {
        return Err(invalid("c_unc needs at least 2 passes"));
    }
    let (rows, k) = (first.rows(), first.cols());
    if passes.iter().any(|p| p.shape() != first.shape()) {
        return Err(invalid("MC dropout passes differ in shape"));
    }
    let n = passes.len() as f64;
    let mut out = Vec::with_capacity(rows);
    let mut mean = vec![0.0; k];
    for i in 0..rows {
        mean.iter_mut().for_each(|m| *m = 0.0);
        for p in passes {
            mean.iter_mut().zip(p.row(i)).for_each(|(m, v)| *m += v / n);
        }
        let top = argmax(&mean);
        let values: Vec<f64> = passes.iter().map(|p| p.row(i)[top]).collect();
        let (_, std) = mean_std(&values).expect("non-empty");
        out.push(std.clamp(0.0, 0.5));
    }
    Ok(out)
}

/// MC-dropout uncertainty of `h` per input row.
pub fn c_unc(h: &Hypothesis, x: &Tensor, n: usize, seed: u64) -> Result<Vec<f64>> {
    c_unc_from_passes(&h.mc_dropout_predict(x, n, seed)?)
}

/// Base-2 Jensen-Shannon divergence between the eval-mode predictions of
/// the two models, per input row.
pub fn c_div<A: Classifier + ?Sized, B: Classifier + ?Sized>(h_s: &A, h_t: &B, x: &Tensor) -> Result<Vec<f64>> {
    if h_s.num_classes() != h_t.num_classes() {
        return Err(invalid(format!(
            "class counts differ: {} vs {}",
            h_s.num_classes(),
            h_t.num_classes()
        )));
    }
    let (ps, pt) = (h_s.eval_probs(x)?, h_t.eval_probs(x)?);
    ps.row_iter().zip(pt.row_iter()).map(|(a, b)| js_divergence_base2(a, b)).collect()
}

/// Mean over channels of `target_std / source_std`.
pub fn c_den(source: [f64; 3], target: [f64; 3]) -> Result<f64> {
    if let Some(s) = source.iter().find(|s| !(**s >= SOURCE_STD_FLOOR)) {
        return Err(invalid(format!("source channel std {s} below floor {SOURCE_STD_FLOOR}")));
    }
    Ok(source.iter().zip(&target).map(|(s, t)| t / s).sum::<f64>() / 3.0)
}

/// `ln K`.
pub fn c_cls(k: usize) -> Result<f64> {
    if k < 2 {
        return Err(invalid(format!("class count must be at least 2, got {k}")));
    }
    Ok((k as f64).ln())
}

/// Combines precomputed factors into per-sample radii.
pub fn combine_factors(eps0: f64, c_cls: f64, c_den: f64, c_unc: Vec<f64>, c_div: Vec<f64>) -> Result<AdaptiveFactors> {
    if c_unc.len() != c_div.len() {
        return Err(Error::LengthMismatch(c_unc.len(), c_div.len()));
    }
    let c_adj_unc: Vec<f64> = c_unc.iter().zip(&c_div).map(|(u, d)| u + d).collect();
    let eps = c_adj_unc.iter().map(|a| eps0 * c_cls * c_den * a).collect();
    Ok(AdaptiveFactors {
        c_cls,
        c_den,
        c_unc,
        c_div,
        c_adj_unc,
        eps,
    })
}

/// Per-sample adaptive radii for the rows of `x`.
pub fn adaptive_eps_on(
    h_s: &Hypothesis,
    h_t: &Hypothesis,
    x: &Tensor,
    source_stats: [f64; 3],
    target_stats: [f64; 3],
    spec: &PerturbSpec,
    seed: u64,
) -> Result<AdaptiveFactors> {
    spec.validate()?;
    let cls = c_cls(h_t.k())?;
    let den = c_den(source_stats, target_stats)?;
    let unc = c_unc(h_t, x, spec.mc_samples, rng::derive(seed, "perturb.c_unc", 0))?;
    let div = c_div(h_s, h_t, x)?;
    combine_factors(spec.eps0, cls, den, unc, div)
}

/// Per-sample adaptive radii over a whole target view.
pub fn adaptive_eps(
    h_s: &Hypothesis,
    h_t: &Hypothesis,
    view: &TargetView<'_>,
    spec: &PerturbSpec,
    seed: u64,
) -> Result<AdaptiveFactors> {
    adaptive_eps_on(h_s, h_t, view.inputs, view.source_stats, view.target_stats, spec, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LinearModel;

    fn logistic() -> LinearModel {
        LinearModel::new(Tensor::matrix(2, 2, vec![1.5, 0.0, -0.7, 0.0]).unwrap(), vec![0.2, 0.0]).unwrap()
    }

    #[test]
    fn factor_examples() {
        let p = |v: f64| Tensor::matrix(1, 2, vec![v, 1.0 - v]).unwrap();
        let u = c_unc_from_passes(&[p(0.9), p(0.7)]).unwrap();
        assert!((u[0] - 0.1).abs() < 1e-12);
        let u = c_unc_from_passes(&[p(1.0), p(0.0)]).unwrap();
        assert!((u[0] - 0.5).abs() < 1e-12);
        assert_eq!(c_unc_from_passes(&[p(0.3), p(0.3)]).unwrap(), vec![0.0]);

        assert_eq!(c_den([0.2; 3], [0.2; 3]).unwrap(), 1.0);
        assert!((c_den([0.4; 3], [0.2; 3]).unwrap() - 0.5).abs() < 1e-15);
        assert!((c_den([1.0; 3], [2.0, 1.0, 0.5]).unwrap() - 7.0 / 6.0).abs() < 1e-15);
        assert!(c_den([1.0, 1e-7, 1.0], [1.0; 3]).is_err());

        assert!((c_cls(2).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((c_cls(10).unwrap() - std::f64::consts::LN_10).abs() < 1e-12);
        assert!((c_cls(65).unwrap() - 4.1744).abs() < 1e-4);
        assert!(c_cls(1).is_err());

        let f = combine_factors(1.0, 10f64.ln(), 1.0, vec![0.1], vec![0.2]).unwrap();
        assert!((f.eps[0] - 0.6908).abs() < 1e-4);
        let z = combine_factors(1.0, 3.0, 2.0, vec![0.0], vec![0.0]).unwrap();
        assert_eq!(z.eps, vec![0.0]);
    }

    #[test]
    fn vap_norm_matches_radius() {
        let h = Hypothesis::new(3, 4, 0.1, 2).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.2, -0.1, 0.5, 1.0, 0.3, -0.8]).unwrap();
        let (r, _) = vap(&h, &x, &[0.7, 1.3], &PerturbSpec::default(), 5).unwrap();
        for (row, e) in r.row_iter().zip([0.7, 1.3]) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm / e - 1.0).abs() < 1e-5);
        }
        let (zero, _) = vap(&h, &x, &[0.0, 0.0], &PerturbSpec::default(), 5).unwrap();
        assert!(zero.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn logistic_direction_is_along_weight_difference() {
        // Predictions depend on x only through (w0 - w1)·x = (1.5, -0.7)·x.
        let model = logistic();
        let x = Tensor::matrix(1, 2, vec![0.3, -0.2]).unwrap();
        let (r, t) = vap(&model, &x, &[0.5], &PerturbSpec::default(), 1).unwrap();
        let w = [1.5, -0.7];
        let wn = w[0] * w[0] + w[1] * w[1];
        let cos = (r.data()[0] * w[0] + r.data()[1] * w[1]).abs() / (0.5 * wn.sqrt());
        assert!(cos > 1.0 - 1e-6, "cos {cos}");
        assert_eq!(t.zero_grad_fallbacks, 0);
    }

    #[test]
    fn flat_model_falls_back_to_random_direction() {
        let flat = Hypothesis::zeroed(2, 3, 0.1).unwrap();
        let x = Tensor::matrix(2, 2, vec![0.2, 0.4, -1.0, 0.0]).unwrap();
        let (r, t) = vap(&flat, &x, &[1.0, 2.0], &PerturbSpec::default(), 3).unwrap();
        assert_eq!(t.zero_grad_fallbacks, 2);
        let norm = r.row(1).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 2.0).abs() < 1e-12);
    }

    #[test]
    fn identical_models_have_zero_divergence() {
        let h = Hypothesis::new(2, 3, 0.1, 0).unwrap();
        let x = Tensor::matrix(2, 2, vec![0.2, 0.4, -1.0, 0.0]).unwrap();
        assert_eq!(c_div(&h, &h, &x).unwrap(), vec![0.0, 0.0]);
        let other = Hypothesis::new(2, 4, 0.1, 0).unwrap();
        assert!(c_div(&h, &other, &x).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(PerturbSpec::default().validate().is_ok());
        assert!(PerturbSpec { xi: 0.0, ..Default::default() }.validate().is_err());
        assert!(PerturbSpec { mc_samples: 1, ..Default::default() }.validate().is_err());
        assert!(PerturbSpec { power_iters: 0, ..Default::default() }.validate().is_err());
        assert!(PerturbSpec { eps0: -1.0, ..Default::default() }.validate().is_err());
    }
}
