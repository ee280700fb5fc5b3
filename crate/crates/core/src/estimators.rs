//! Target-error estimators.
//!
//! Everything at the top level of this module is source-free: it sees the
//! two models and the unlabeled target inputs only. Estimators that need
//! labeled source data live in [`baseline`].

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::datagen::{Augmenter, TargetView};
use crate::error::{invalid, Error, Result};
use crate::metrics::disagreement_rate;
use crate::model::Hypothesis;
use crate::perturb::{adaptive_eps, random_perturbation, vap, AdaptiveFactors, PerturbSpec, VapTelemetry};
use crate::rng;

/// Number of random views averaged by the `rnd_ens` estimator.
pub const RND_ENSEMBLE_VIEWS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorId {
    Naive,
    Rnd,
    RndEns,
    Adv,
    Aap,
    Ac,
    Doc,
    Gde,
}

impl EstimatorId {
    pub const ALL: [EstimatorId; 8] = [
        EstimatorId::Naive,
        EstimatorId::Rnd,
        EstimatorId::RndEns,
        EstimatorId::Adv,
        EstimatorId::Aap,
        EstimatorId::Ac,
        EstimatorId::Doc,
        EstimatorId::Gde,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorId::Naive => "naive",
            EstimatorId::Rnd => "rnd",
            EstimatorId::RndEns => "rnd_ens",
            EstimatorId::Adv => "adv",
            EstimatorId::Aap => "aap",
            EstimatorId::Ac => "ac",
            EstimatorId::Doc => "doc",
            EstimatorId::Gde => "gde",
        }
    }

    /// False for the baselines that read labeled source data.
    pub fn is_source_free(self) -> bool {
        !matches!(self, EstimatorId::Doc | EstimatorId::Gde)
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator id {s:?}")))
    }
}

/// An estimated target error rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub name: EstimatorId,
    pub value: f64,
    /// Per-sample disagreement indicator, when the estimate is a plain
    /// disagreement rate over the target.
    pub per_sample: Option<Vec<bool>>,
    pub wall_time: f64,
}

impl Estimate {
    fn from_mask(name: EstimatorId, mask: Vec<bool>, started: Instant) -> Result<Self> {
        if mask.is_empty() {
            return Err(Error::Empty("target"));
        }
        let value = mask.iter().filter(|m| **m).count() as f64 / mask.len() as f64;
        Ok(Self {
            name,
            value,
            per_sample: Some(mask),
            wall_time: started.elapsed().as_secs_f64(),
        })
    }

    fn scalar(name: EstimatorId, value: f64, started: Instant) -> Self {
        Self {
            name,
            value: value.clamp(0.0, 1.0),
            per_sample: None,
            wall_time: started.elapsed().as_secs_f64(),
        }
    }
}

fn check_pair(h_s: &Hypothesis, h_t: &Hypothesis, x: &Tensor) -> Result<()> {
    if h_s.k() != h_t.k() {
        return Err(invalid(format!("class counts differ: {} vs {}", h_s.k(), h_t.k())));
    }
    if x.rows() == 0 {
        return Err(Error::Empty("target"));
    }
    Ok(())
}

fn mask(a: &[usize], b: &[usize]) -> Vec<bool> {
    a.iter().zip(b).map(|(x, y)| x != y).collect()
}

/// Disagreement between the two models' labels on clean target inputs.
pub fn est_naive(h_s: &Hypothesis, h_t: &Hypothesis, x: &Tensor) -> Result<Estimate> {
    let started = Instant::now();
    check_pair(h_s, h_t, x)?;
    let (a, b) = (h_s.predict_labels(x)?, h_t.predict_labels(x)?);
    Estimate::from_mask(EstimatorId::Naive, mask(&a, &b), started)
}

/// Mean over `n_views` random views of the disagreement between `h_s` on
/// clean inputs and `h_t` on the perturbed inputs. With one view the
/// per-sample mask is kept.
pub fn est_rnd(
    h_s: &Hypothesis,
    h_t: &Hypothesis,
    x: &Tensor,
    augmenter: &Augmenter,
    strength: f64,
    n_views: usize,
    seed: u64,
) -> Result<Estimate> {
    let started = Instant::now();
    check_pair(h_s, h_t, x)?;
    if n_views == 0 {
        return Err(invalid("est_rnd needs at least one view"));
    }
    let reference = h_s.predict_labels(x)?;
    let name = if n_views == 1 { EstimatorId::Rnd } else { EstimatorId::RndEns };
    let mut masks = Vec::with_capacity(n_views);
    for v in 0..n_views {
        let view = random_perturbation(augmenter, x, strength, rng::derive(seed, "estimators.rnd", v as u64))?;
        masks.push(mask(&reference, &h_t.predict_labels(&view)?));
    }
    if n_views == 1 {
        return Estimate::from_mask(name, masks.pop().expect("one view"), started);
    }
    let total: f64 = masks
        .iter()
        .map(|m| m.iter().filter(|d| **d).count() as f64 / m.len() as f64)
        .sum();
    Ok(Estimate::scalar(name, total / n_views as f64, started))
}

/// Disagreement between `h_s` on clean inputs and `h_t` on inputs moved by
/// a virtual adversarial perturbation of per-row radius `eps[i]`.
pub fn est_adv_per_sample(
    h_s: &Hypothesis,
    h_t: &Hypothesis,
    x: &Tensor,
    eps: &[f64],
    spec: &PerturbSpec,
    seed: u64,
) -> Result<(Estimate, VapTelemetry)> {
    let started = Instant::now();
    check_pair(h_s, h_t, x)?;
    let (r, telemetry) = vap(h_t, x, eps, spec, rng::derive(seed, "estimators.adv", 0))?;
    let moved = Tensor::new(x.shape().to_vec(), x.data().iter().zip(r.data()).map(|(a, b)| a + b).collect())?;
    let reference = h_s.predict_labels(x)?;
    let est = Estimate::from_mask(EstimatorId::Adv, mask(&reference, &h_t.predict_labels(&moved)?), started)?;
    Ok((est, telemetry))
}

/// [`est_adv_per_sample`] with one radius for every sample.
pub fn est_adv(
    h_s: &Hypothesis,
    h_t: &Hypothesis,
    x: &Tensor,
    eps: f64,
    spec: &PerturbSpec,
    seed: u64,
) -> Result<(Estimate, VapTelemetry)> {
    est_adv_per_sample(h_s, h_t, x, &vec![eps; x.rows()], spec, seed)
}

/// Adversarial disagreement with adaptively scaled per-sample radii.
pub fn est_aap(
    h_s: &Hypothesis,
    h_t: &Hypothesis,
    view: &TargetView<'_>,
    spec: &PerturbSpec,
    seed: u64,
) -> Result<(Estimate, AdaptiveFactors, VapTelemetry)> {
    let started = Instant::now();
    let factors = adaptive_eps(h_s, h_t, view, spec, rng::derive(seed, "estimators.aap.factors", 0))?;
    let (mut est, telemetry) = est_adv_per_sample(h_s, h_t, view.inputs, &factors.eps, spec, seed)?;
    est.name = EstimatorId::Aap;
    est.wall_time = started.elapsed().as_secs_f64();
    Ok((est, factors, telemetry))
}

/// One minus the mean top-class probability of `h` on the target.
pub fn est_ac(h: &Hypothesis, x: &Tensor) -> Result<Estimate> {
    let started = Instant::now();
    if x.rows() == 0 {
        return Err(Error::Empty("target"));
    }
    let conf = h.predict(x)?.max_confidence();
    Ok(Estimate::scalar(EstimatorId::Ac, ac_from_confidences(&conf)?, started))
}

/// `1 − mean(confidences)`.
pub fn ac_from_confidences(confidences: &[f64]) -> Result<f64> {
    if confidences.is_empty() {
        return Err(Error::Empty("confidences"));
    }
    Ok((1.0 - confidences.iter().sum::<f64>() / confidences.len() as f64).clamp(0.0, 1.0))
}

/// Everything a source-free estimator may consume.
pub struct SourceFreeInputs<'a> {
    pub h_s: &'a Hypothesis,
    pub h_t: &'a Hypothesis,
    pub view: TargetView<'a>,
    pub augmenter: &'a Augmenter,
    pub spec: &'a PerturbSpec,
    pub seed: u64,
}

/// Output of a registry call.
#[derive(Clone, Debug)]
pub struct EstimatorRun {
    pub estimate: Estimate,
    pub factors: Option<AdaptiveFactors>,
    pub telemetry: Option<VapTelemetry>,
}

/// Runs the source-free estimator `id`. The `adv` estimator uses the
/// fixed radius `eps0`.
pub fn run_source_free(id: EstimatorId, inp: &SourceFreeInputs<'_>) -> Result<EstimatorRun> {
    let x = inp.view.inputs;
    let seed = rng::derive(inp.seed, id.as_str(), 0);
    let plain = |estimate| EstimatorRun {
        estimate,
        factors: None,
        telemetry: None,
    };
    Ok(match id {
        EstimatorId::Naive => plain(est_naive(inp.h_s, inp.h_t, x)?),
        EstimatorId::Rnd => plain(est_rnd(inp.h_s, inp.h_t, x, inp.augmenter, inp.spec.rnd_strength, 1, seed)?),
        EstimatorId::RndEns => plain(est_rnd(
            inp.h_s,
            inp.h_t,
            x,
            inp.augmenter,
            inp.spec.rnd_strength,
            RND_ENSEMBLE_VIEWS,
            seed,
        )?),
        EstimatorId::Adv => {
            let (estimate, t) = est_adv(inp.h_s, inp.h_t, x, inp.spec.eps0, inp.spec, seed)?;
            EstimatorRun {
                estimate,
                factors: None,
                telemetry: Some(t),
            }
        }
        EstimatorId::Aap => {
            let (estimate, f, t) = est_aap(inp.h_s, inp.h_t, &inp.view, inp.spec, seed)?;
            EstimatorRun {
                estimate,
                factors: Some(f),
                telemetry: Some(t),
            }
        }
        EstimatorId::Ac => plain(est_ac(inp.h_s, x)?),
        EstimatorId::Doc | EstimatorId::Gde => {
            return Err(invalid(format!("{id} needs source access; use the baseline module")))
        }
    })
}

/// Baselines that need labeled source data. Only the harness calls these.
pub mod baseline {
    use std::time::Instant;

    use super::{Estimate, EstimatorId};
    use crate::autodiff::Tensor;
    use crate::datagen::DataBundle;
    use crate::error::{invalid, Error, Result};
    use crate::metrics::disagreement_rate;
    use crate::model::Hypothesis;

    /// `clamp(holdout_error + (source_confidence − target_confidence), 0, 1)`.
    pub fn doc_from(holdout_error: f64, source_confidence: f64, target_confidence: f64) -> f64 {
        (holdout_error + (source_confidence - target_confidence)).clamp(0.0, 1.0)
    }

    /// Difference of confidences anchored at the source holdout error.
    pub fn est_doc(h_s: &Hypothesis, bundle: &DataBundle) -> Result<Estimate> {
        let started = Instant::now();
        let holdout = bundle.source_holdout();
        if holdout.is_empty() {
            return Err(Error::Empty("source holdout"));
        }
        let pred = h_s.predict(&holdout.inputs)?;
        let holdout_error = disagreement_rate(&pred.labels, &holdout.labels)?;
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let src_conf = mean(pred.max_confidence());
        let tgt_conf = mean(h_s.predict(bundle.target_view().inputs)?.max_confidence());
        Ok(Estimate {
            name: EstimatorId::Doc,
            value: doc_from(holdout_error, src_conf, tgt_conf),
            per_sample: None,
            wall_time: started.elapsed().as_secs_f64(),
        })
    }

    /// Mean pairwise label disagreement among sibling source models.
    pub fn est_gde(siblings: &[Hypothesis], x: &Tensor) -> Result<Estimate> {
        let started = Instant::now();
        if siblings.len() < 2 {
            return Err(invalid(format!("GDE needs at least 2 siblings, got {}", siblings.len())));
        }
        if siblings.iter().any(|h| h.k() != siblings[0].k()) {
            return Err(invalid("GDE siblings disagree on the class count"));
        }
        let labels = siblings.iter().map(|h| h.predict_labels(x)).collect::<Result<Vec<_>>>()?;
        let mut rates = Vec::new();
        for i in 0..labels.len() {
            for j in (i + 1)..labels.len() {
                rates.push(disagreement_rate(&labels[i], &labels[j])?);
            }
        }
        Ok(Estimate {
            name: EstimatorId::Gde,
            value: rates.iter().sum::<f64>() / rates.len() as f64,
            per_sample: None,
            wall_time: started.elapsed().as_secs_f64(),
        })
    }
}

/// Disagreement between two label lists, exposed for oracles.
pub fn label_disagreement(a: &[usize], b: &[usize]) -> Result<f64> {
    disagreement_rate(a, b)
}
