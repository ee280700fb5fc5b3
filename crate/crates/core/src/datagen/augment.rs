use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::InputKind;
use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};
use crate::rng;

/// Chance that a weak image view is translated by one pixel.
const WEAK_SHIFT_PROB: f64 = 0.25;
const WEAK_BRIGHTNESS: f64 = 0.05;
const STRONG_NOISE: f64 = 0.1;
const STRONG_CONTRAST: (f64, f64) = (0.6, 1.4);
const POINT_WEAK_JITTER: f64 = 0.02;
const POINT_STRONG_JITTER: f64 = 0.1;
const POINT_STRONG_SCALE: (f64, f64) = (0.8, 1.2);

/// Weak, strong and random views of an input batch. Point-cloud views are
/// scaled by per-dimension statistics of the batch the augmenter was
/// fitted on; image views work in absolute pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmenter {
    kind: InputKind,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Augmenter {
    pub fn fit(inputs: &Tensor, kind: InputKind) -> Result<Self> {
        check_shape(inputs, kind)?;
        if inputs.rows() == 0 {
            return Err(Error::Empty("augmenter reference batch"));
        }
        let dim = kind.dim();
        let n = inputs.rows() as f64;
        let mut mean = vec![0.0; dim];
        for row in inputs.row_iter() {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; dim];
        for row in inputs.row_iter() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        Ok(Self {
            kind,
            mean,
            std: var.into_iter().map(f64::sqrt).collect(),
        })
    }

    pub fn kind(&self) -> InputKind {
        self.kind
    }

    pub fn weak(&self, x: &Tensor, seed: u64) -> Result<Tensor> {
        check_shape(x, self.kind)?;
        let mut rng = rng::stream(seed, "augment.weak", 0);
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(self.kind.dim().max(1)) {
            match self.kind {
                InputKind::Points { .. } => self.jitter(row, POINT_WEAK_JITTER, &mut rng),
                InputKind::Image { .. } => self.weak_image(row, &mut rng),
            }
        }
        Ok(out)
    }

    pub fn strong(&self, x: &Tensor, seed: u64) -> Result<Tensor> {
        check_shape(x, self.kind)?;
        let mut rng = rng::stream(seed, "augment.strong", 0);
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(self.kind.dim().max(1)) {
            match self.kind {
                InputKind::Points { .. } => {
                    self.jitter(row, POINT_STRONG_JITTER, &mut rng);
                    self.scale(row, POINT_STRONG_SCALE, &mut rng);
                }
                InputKind::Image { height, width, .. } => {
                    self.weak_image(row, &mut rng);
                    add_noise(row, STRONG_NOISE, &mut rng);
                    erase_patch(row, self.kind, height, width, &mut rng);
                    let c = rng.random_range(STRONG_CONTRAST.0..=STRONG_CONTRAST.1);
                    contrast(row, self.kind, c);
                    clamp_unit(row);
                }
            }
        }
        Ok(out)
    }

    /// A strong-style view whose noise, scaling and contrast ranges grow
    /// linearly with `strength`. Strength 0 returns an exact copy.
    pub fn random_view(&self, x: &Tensor, strength: f64, seed: u64) -> Result<Tensor> {
        check_shape(x, self.kind)?;
        if !(strength >= 0.0) || !strength.is_finite() {
            return Err(invalid(format!("perturbation strength must be non-negative, got {strength}")));
        }
        if strength == 0.0 {
            return Ok(x.clone());
        }
        let mut rng = rng::stream(seed, "augment.random", 0);
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(self.kind.dim().max(1)) {
            match self.kind {
                InputKind::Points { .. } => {
                    self.jitter(row, POINT_STRONG_JITTER * strength, &mut rng);
                    let spread = 0.2 * strength;
                    self.scale(row, (1.0 - spread, 1.0 + spread), &mut rng);
                }
                InputKind::Image { .. } => {
                    add_noise(row, STRONG_NOISE * strength, &mut rng);
                    let spread = 0.4 * strength;
                    let c = rng.random_range(1.0 - spread..=1.0 + spread).max(0.0);
                    contrast(row, self.kind, c);
                    let b = WEAK_BRIGHTNESS * strength;
                    let shift = rng.random_range(-b..=b);
                    row.iter_mut().for_each(|v| *v += shift);
                    clamp_unit(row);
                }
            }
        }
        Ok(out)
    }

    fn jitter<R: Rng>(&self, row: &mut [f64], factor: f64, rng: &mut R) {
        for (v, s) in row.iter_mut().zip(&self.std) {
            let z: f64 = StandardNormal.sample(rng);
            *v += factor * s * z;
        }
    }

    /// Per-coordinate scaling about the fitted mean.
    fn scale<R: Rng>(&self, row: &mut [f64], range: (f64, f64), rng: &mut R) {
        for (v, m) in row.iter_mut().zip(&self.mean) {
            let s = rng.random_range(range.0..=range.1);
            *v = m + (*v - m) * s;
        }
    }

    fn weak_image<R: Rng>(&self, row: &mut [f64], rng: &mut R) {
        let InputKind::Image { height, width, .. } = self.kind else {
            return;
        };
        if rng.random::<f64>() < WEAK_SHIFT_PROB {
            let dy = rng.random_range(-1..=1);
            let dx = rng.random_range(-1..=1);
            translate_edge(row, self.kind, height, width, dy, dx);
        }
        let b = rng.random_range(-WEAK_BRIGHTNESS..=WEAK_BRIGHTNESS);
        row.iter_mut().for_each(|v| *v += b);
        clamp_unit(row);
    }
}

fn check_shape(x: &Tensor, kind: InputKind) -> Result<()> {
    if kind.dim() == 0 || (matches!(kind, InputKind::Points { dim } if dim < 2)) {
        return Err(Error::Typology(format!("cannot augment inputs of kind {kind:?}")));
    }
    if x.shape().len() != 2 || x.cols() != kind.dim() {
        return Err(Error::ShapeMismatch {
            op: "augment",
            lhs: x.shape().to_vec(),
            rhs: vec![kind.dim()],
        });
    }
    Ok(())
}

fn planes(kind: InputKind) -> (usize, usize) {
    match kind {
        InputKind::Image {
            channels,
            height,
            width,
        } => (channels, height * width),
        InputKind::Points { dim } => (1, dim),
    }
}

/// Integer translation with replicated borders.
fn translate_edge(row: &mut [f64], kind: InputKind, height: usize, width: usize, dy: i32, dx: i32) {
    if dy == 0 && dx == 0 {
        return;
    }
    let (channels, plane) = planes(kind);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    for c in 0..channels {
        let src = row[c * plane..(c + 1) * plane].to_vec();
        for r in 0..height {
            for col in 0..width {
                let sr = clamp(r as isize - dy as isize, height);
                let sc = clamp(col as isize - dx as isize, width);
                row[c * plane + r * width + col] = src[sr * width + sc];
            }
        }
    }
}

fn add_noise<R: Rng>(row: &mut [f64], sigma: f64, rng: &mut R) {
    for v in row.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += sigma * z;
    }
}

fn erase_patch<R: Rng>(row: &mut [f64], kind: InputKind, height: usize, width: usize, rng: &mut R) {
    if height < 2 || width < 2 {
        return;
    }
    let (channels, plane) = planes(kind);
    let r0 = rng.random_range(0..height - 1);
    let c0 = rng.random_range(0..width - 1);
    for c in 0..channels {
        for r in r0..r0 + 2 {
            for col in c0..c0 + 2 {
                row[c * plane + r * width + col] = 0.0;
            }
        }
    }
}

/// Scales each channel's deviation from its own mean by `factor`.
fn contrast(row: &mut [f64], kind: InputKind, factor: f64) {
    let (channels, plane) = planes(kind);
    for c in 0..channels {
        let px = &mut row[c * plane..(c + 1) * plane];
        let mean = px.iter().sum::<f64>() / plane as f64;
        px.iter_mut().for_each(|v| *v = (*v - mean) * factor + mean);
    }
}

fn clamp_unit(row: &mut [f64]) {
    row.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Weak view of `x`, with point statistics taken from `x` itself.
pub fn augment_weak(x: &Tensor, kind: InputKind, seed: u64) -> Result<Tensor> {
    Augmenter::fit(x, kind)?.weak(x, seed)
}

/// Strong view of `x`, with point statistics taken from `x` itself.
pub fn augment_strong(x: &Tensor, kind: InputKind, seed: u64) -> Result<Tensor> {
    Augmenter::fit(x, kind)?.strong(x, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    const IMG: InputKind = InputKind::Image {
        channels: 1,
        height: 3,
        width: 3,
    };

    fn points() -> Tensor {
        Tensor::matrix(4, 2, vec![0.0, 1.0, 1.0, 3.0, 2.0, 0.0, 5.0, 2.0]).unwrap()
    }

    #[test]
    fn same_seed_same_view() {
        let x = points();
        let kind = InputKind::Points { dim: 2 };
        assert_eq!(augment_strong(&x, kind, 4).unwrap(), augment_strong(&x, kind, 4).unwrap());
        assert_eq!(augment_weak(&x, kind, 4).unwrap(), augment_weak(&x, kind, 4).unwrap());
    }

    #[test]
    fn strong_view_moves_continuous_inputs() {
        let x = points();
        let y = augment_strong(&x, InputKind::Points { dim: 2 }, 1).unwrap();
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| a != b));
    }

    #[test]
    fn random_view_at_zero_strength_is_exact_copy() {
        let x = points();
        let aug = Augmenter::fit(&x, InputKind::Points { dim: 2 }).unwrap();
        assert_eq!(aug.random_view(&x, 0.0, 3).unwrap(), x);
        assert!(aug.random_view(&x, -1.0, 3).is_err());
    }

    #[test]
    fn edge_translation_replicates_border() {
        let mut row: Vec<f64> = (0..9).map(f64::from).collect();
        translate_edge(&mut row, IMG, 3, 3, 0, 1);
        assert_eq!(row, vec![0.0, 0.0, 1.0, 3.0, 3.0, 4.0, 6.0, 6.0, 7.0]);
    }

    #[test]
    fn image_views_stay_in_unit_range() {
        let x = Tensor::matrix(3, 9, (0..27).map(|i| (i % 9) as f64 / 8.0).collect()).unwrap();
        let aug = Augmenter::fit(&x, IMG).unwrap();
        for seed in 0..20 {
            for view in [aug.weak(&x, seed).unwrap(), aug.strong(&x, seed).unwrap(), aug.random_view(&x, 3.0, seed).unwrap()] {
                assert!(view.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn rejects_one_dimensional_points() {
        let x = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(augment_weak(&x, InputKind::Points { dim: 1 }, 0).is_err());
    }
}
