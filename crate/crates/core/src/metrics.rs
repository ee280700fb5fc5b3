//! Functionals over probability vectors and label lists.
//!
//! Entropies and KL are in nats; the Jensen-Shannon divergence is in bits
//! so that it is bounded by 1.

use crate::error::{Error, Result};

/// Tolerance on `Σ p = 1` accepted by [`ProbVec`] validation.
pub const SUM_TOLERANCE: f64 = 1e-6;

const CLAMP: f64 = 1e-12;

/// A validated probability vector over `K` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVec(Vec<f64>);

impl ProbVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        validate(&values)?;
        Ok(Self(values))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for ProbVec {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Checks non-negativity and the unit-sum tolerance.
pub fn validate(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidProbVec("empty".into()));
    }
    if let Some(v) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidProbVec(format!("entry {v} is not a finite non-negative value")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidProbVec(format!("sums to {total}")));
    }
    Ok(())
}

fn validate_pair(p: &[f64], q: &[f64]) -> Result<()> {
    validate(p)?;
    validate(q)?;
    if p.len() != q.len() {
        return Err(Error::LengthMismatch(p.len(), q.len()));
    }
    Ok(())
}

/// Shannon entropy `−Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    validate(p)?;
    Ok(-p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>())
}

/// Cross-entropy `−Σ target · ln pred`, `pred` clamped at 1e-12.
pub fn cross_entropy(target: &[f64], pred: &[f64]) -> Result<f64> {
    validate_pair(target, pred)?;
    Ok(-target
        .iter()
        .zip(pred)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, q)| t * q.max(CLAMP).ln())
        .sum::<f64>())
}

/// `KL(p ‖ q)` in nats, both arguments clamped at 1e-12 inside the log.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    validate_pair(p, q)?;
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a.max(CLAMP).ln() - b.max(CLAMP).ln()))
        .sum();
    Ok(kl.max(0.0))
}

/// Jensen-Shannon divergence with base-2 logarithms; lies in `[0, 1]`.
pub fn js_divergence_base2(p: &[f64], q: &[f64]) -> Result<f64> {
    validate_pair(p, q)?;
    let half_kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).log2())
            .sum::<f64>()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * half_kl(p, &m) + 0.5 * half_kl(q, &m);
    Ok(js.clamp(0.0, 1.0))
}

/// Fraction of positions at which two label lists differ.
pub fn disagreement_rate(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::Empty("label list"));
    }
    let differing = a.iter().zip(b).filter(|(x, y)| x != y).count();
    Ok(differing as f64 / a.len() as f64)
}

/// Mean absolute error between error-rate estimates and true error rates.
pub fn mae(estimates: &[f64], truths: &[f64]) -> Result<f64> {
    if estimates.len() != truths.len() {
        return Err(Error::LengthMismatch(estimates.len(), truths.len()));
    }
    if estimates.is_empty() {
        return Err(Error::Empty("mae input"));
    }
    if let Some(v) = estimates
        .iter()
        .chain(truths)
        .find(|v| !(0.0..=1.0).contains(*v))
    {
        return Err(Error::InvalidArgument(format!("rate {v} outside [0, 1]")));
    }
    let total: f64 = estimates.iter().zip(truths).map(|(e, t)| (e - t).abs()).sum();
    Ok(total / estimates.len() as f64)
}

/// Population mean and standard deviation. `None` for an empty slice.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}
