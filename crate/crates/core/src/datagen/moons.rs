use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{split_source, DataBundle, InputKind, LabeledSplit};
use crate::autodiff::Tensor;
use crate::error::{invalid, Result};
use crate::rng;

/// Two interleaved half-circles centred on the origin. Half of the points
/// belong to each class. Class 1 is the point reflection of class 0, so a
/// 180° rotation maps each moon onto the other.
fn sample<R: Rng>(n: usize, noise_sigma: f64, rng: &mut R) -> Result<(Tensor, Vec<usize>)> {
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = usize::from(i >= n / 2);
        let t = rng.random::<f64>() * std::f64::consts::PI;
        let (x, y) = (t.cos() - 0.5, t.sin() - 0.25);
        let (x, y) = if label == 0 { (x, y) } else { (-x, -y) };
        data.push(x + noise.sample(rng));
        data.push(y + noise.sample(rng));
        labels.push(label);
    }
    Ok((Tensor::matrix(n, 2, data)?, labels))
}

fn rotate(points: &mut Tensor, degrees: f64) {
    let (s, c) = degrees.to_radians().sin_cos();
    for row in points.data_mut().chunks_mut(2) {
        let (x, y) = (row[0], row[1]);
        row[0] = c * x - s * y;
        row[1] = s * x + c * y;
    }
}

/// Source: `n` two-moons points (80/20 train/holdout). Target: `n` fresh
/// points from the same generator rotated by `rotation_deg` about the origin.
pub fn make_two_moons(n: usize, noise_sigma: f64, rotation_deg: f64, seed: u64) -> Result<DataBundle> {
    if n < 4 || n % 2 != 0 {
        return Err(invalid(format!("two-moons needs an even n >= 4, got {n}")));
    }
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(invalid(format!("noise sigma must be non-negative, got {noise_sigma}")));
    }
    let (src, src_labels) = sample(n, noise_sigma, &mut rng::stream(seed, "moons.source", 0))?;
    let (train, holdout): (LabeledSplit, LabeledSplit) =
        split_source(&src, &src_labels, &mut rng::stream(seed, "moons.split", 0));
    let (mut target, target_labels) =
        sample(n, noise_sigma, &mut rng::stream(seed, "moons.target", 0))?;
    if rotation_deg != 0.0 {
        rotate(&mut target, rotation_deg);
    }
    DataBundle::from_parts(InputKind::Points { dim: 2 }, 2, train, holdout, target, target_labels)
}
