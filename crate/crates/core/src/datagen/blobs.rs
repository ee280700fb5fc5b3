use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{split_source, DataBundle, InputKind};
use crate::autodiff::Tensor;
use crate::error::{invalid, Result};
use crate::rng;

/// Isotropic Gaussian clusters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsConfig {
    pub k: usize,
    pub dim: usize,
    pub n: usize,
    /// Target cluster means move by `shift_scale · cluster_std`.
    pub shift_scale: f64,
    #[serde(default = "one")]
    pub cluster_std: f64,
    /// Per-coordinate std of the cluster centres, in units of `cluster_std`.
    #[serde(default = "one")]
    pub center_spread: f64,
}

fn one() -> f64 {
    1.0
}

impl BlobsConfig {
    pub fn new(k: usize, dim: usize, n: usize, shift_scale: f64) -> Self {
        Self {
            k,
            dim,
            n,
            shift_scale,
            cluster_std: 1.0,
            center_spread: 1.0,
        }
    }
}

fn gaussian_vec<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn sample<R: Rng>(centers: &[Vec<f64>], n: usize, std: f64, rng: &mut R) -> Result<(Tensor, Vec<usize>)> {
    let k = centers.len();
    let dim = centers[0].len();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k;
        for c in &centers[label] {
            let z: f64 = StandardNormal.sample(rng);
            data.push(c + std * z);
        }
        labels.push(label);
    }
    Ok((Tensor::matrix(n, dim, data)?, labels))
}

/// `make_blobs_with` using unit cluster std and unit centre spread.
pub fn make_blobs(k: usize, dim: usize, shift_scale: f64, seed: u64, n: usize) -> Result<DataBundle> {
    make_blobs_with(&BlobsConfig::new(k, dim, n, shift_scale), seed)
}

/// Source clusters with balanced labels; target clusters share the source
/// structure but each mean is displaced along its own random direction.
pub fn make_blobs_with(cfg: &BlobsConfig, seed: u64) -> Result<DataBundle> {
    if cfg.k < 2 || cfg.dim < 2 {
        return Err(invalid(format!("blobs need k >= 2 and dim >= 2, got k={} dim={}", cfg.k, cfg.dim)));
    }
    if cfg.n < 2 {
        return Err(invalid(format!("blobs need n >= 2, got {}", cfg.n)));
    }
    if !(cfg.shift_scale >= 0.0) || !(cfg.cluster_std > 0.0) || !(cfg.center_spread >= 0.0) {
        return Err(invalid("blobs scales must be non-negative (cluster_std positive)"));
    }
    let mut crng = rng::stream(seed, "blobs.centers", 0);
    let centers: Vec<Vec<f64>> = (0..cfg.k)
        .map(|_| {
            gaussian_vec(cfg.dim, &mut crng)
                .into_iter()
                .map(|z| z * cfg.center_spread * cfg.cluster_std)
                .collect()
        })
        .collect();
    let (src, src_labels) = sample(&centers, cfg.n, cfg.cluster_std, &mut rng::stream(seed, "blobs.source", 0))?;
    let (train, holdout) = split_source(&src, &src_labels, &mut rng::stream(seed, "blobs.split", 0));

    let mut srng = rng::stream(seed, "blobs.shift", 0);
    let shifted: Vec<Vec<f64>> = centers
        .iter()
        .map(|c| {
            let dir = gaussian_vec(cfg.dim, &mut srng);
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            c.iter()
                .zip(&dir)
                .map(|(ci, di)| ci + cfg.shift_scale * cfg.cluster_std * di / norm)
                .collect()
        })
        .collect();
    let (target, target_labels) =
        sample(&shifted, cfg.n, cfg.cluster_std, &mut rng::stream(seed, "blobs.target", 0))?;
    DataBundle::from_parts(InputKind::Points { dim: cfg.dim }, cfg.k, train, holdout, target, target_labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reports_requested_class_count() {
        let b = make_blobs(10, 16, 1.0, 0, 200).unwrap();
        assert_eq!(b.k(), 10);
        assert_eq!(b.dim(), 16);
    }

    #[test]
    fn zero_shift_keeps_target_law() {
        // With no shift the target is another draw around the same centres:
        // its per-class means sit within sampling noise of the source's.
        let b = make_blobs_with(&BlobsConfig { center_spread: 5.0, ..BlobsConfig::new(3, 4, 3000, 0.0) }, 2).unwrap();
        let gate = crate::harness::EvaluationGate::new();
        let labels = b.reveal_target_labels(&gate).unwrap().to_vec();
        let tv = b.target_view();
        let src = b.source_train().clone();
        for class in 0..3 {
            let mean = |inputs: &Tensor, lab: &[usize]| -> Vec<f64> {
                let rows: Vec<&[f64]> = inputs.row_iter().zip(lab).filter(|(_, &l)| l == class).map(|(r, _)| r).collect();
                (0..4).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect()
            };
            let a = mean(&src.inputs, &src.labels);
            let t = mean(tv.inputs, &labels);
            for j in 0..4 {
                assert!((a[j] - t[j]).abs() < 0.2, "class {class} dim {j}: {} vs {}", a[j], t[j]);
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(make_blobs(1, 4, 0.0, 0, 10).is_err());
        assert!(make_blobs(3, 1, 0.0, 0, 10).is_err());
        assert!(make_blobs(3, 4, -1.0, 0, 10).is_err());
    }
}
