use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::InputKind;
use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    Contrast,
    Brightness,
    GaussianBlur,
    Pixelate,
    Saturate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 7] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Pixelate,
        CorruptionKind::Saturate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::Saturate => "saturate",
        }
    }

    /// The severity-indexed parameter for this kind.
    pub fn parameter(self, severity: u8) -> f64 {
        let s = severity as usize;
        match self {
            CorruptionKind::GaussianNoise => [0.0, 0.04, 0.08, 0.12, 0.18, 0.26][s],
            CorruptionKind::ShotNoise => [f64::INFINITY, 60.0, 25.0, 12.0, 5.0, 3.0][s],
            CorruptionKind::Contrast => [1.0, 0.75, 0.6, 0.45, 0.3, 0.15][s],
            CorruptionKind::Brightness => [0.0, 0.1, 0.2, 0.3, 0.4, 0.5][s],
            CorruptionKind::GaussianBlur => [0.0, 0.4, 0.6, 0.8, 1.0, 1.3][s],
            CorruptionKind::Pixelate => [1.0, 1.0, 2.0, 2.0, 4.0, 4.0][s],
            CorruptionKind::Saturate => [1.0, 1.3, 1.7, 2.2, 2.8, 3.5][s],
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown corruption kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 0 (identity) through 5.
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if severity > 5 {
            return Err(invalid(format!("severity must be in 0..=5, got {severity}")));
        }
        Ok(Self { kind, severity })
    }
}

/// Applies a severity-indexed corruption to every image in `inputs`.
/// Severity 0 returns an exact copy; every other output is clamped to
/// `[0, 1]`.
pub fn corrupt(inputs: &Tensor, kind: InputKind, spec: CorruptionSpec, seed: u64) -> Result<Tensor> {
    let InputKind::Image {
        channels,
        height,
        width,
    } = kind
    else {
        return Err(Error::Typology("corruptions apply to images only".into()));
    };
    if inputs.shape().len() != 2 || inputs.cols() != kind.dim() {
        return Err(Error::ShapeMismatch {
            op: "corrupt",
            lhs: inputs.shape().to_vec(),
            rhs: vec![kind.dim()],
        });
    }
    let spec = CorruptionSpec::new(spec.kind, spec.severity)?;
    if spec.severity == 0 {
        return Ok(inputs.clone());
    }
    let param = spec.kind.parameter(spec.severity);
    let plane = height * width;
    let mut rng = rng::stream(seed, "corrupt", spec.severity as u64);
    let mut out = inputs.clone();
    for row in out.data_mut().chunks_mut(kind.dim()) {
        for c in 0..channels {
            let px = &mut row[c * plane..(c + 1) * plane];
            match spec.kind {
                CorruptionKind::GaussianNoise => {
                    let noise = Normal::new(0.0, param).map_err(|e| invalid(e.to_string()))?;
                    px.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
                }
                CorruptionKind::ShotNoise => shot_noise(px, param, &mut rng)?,
                CorruptionKind::Contrast => {
                    let mean = px.iter().sum::<f64>() / plane as f64;
                    px.iter_mut().for_each(|v| *v = (*v - mean) * param + mean);
                }
                CorruptionKind::Brightness => px.iter_mut().for_each(|v| *v += param),
                CorruptionKind::GaussianBlur => blur(px, height, width, param),
                CorruptionKind::Pixelate => pixelate(px, height, width, param as usize),
                CorruptionKind::Saturate => px.iter_mut().for_each(|v| *v = (*v - 0.5) * param + 0.5),
            }
        }
        row.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Ok(out)
}

fn shot_noise<R: Rng>(px: &mut [f64], rate: f64, rng: &mut R) -> Result<()> {
    for v in px.iter_mut() {
        let lambda = v.max(0.0) * rate;
        *v = if lambda > 0.0 {
            let counts: f64 = Poisson::new(lambda).map_err(|e| invalid(e.to_string()))?.sample(rng);
            counts / rate
        } else {
            0.0
        };
    }
    Ok(())
}

fn blur_kernel(sigma: f64) -> Vec<f64> {
    let radius: i32 = if sigma <= 0.6 { 1 } else { 2 };
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders.
fn blur(px: &mut [f64], height: usize, width: usize, sigma: f64) {
    let kernel = blur_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; px.len()];
    for r in 0..height {
        for c in 0..width {
            tmp[r * width + c] = kernel
                .iter()
                .enumerate()
                .map(|(j, w)| w * px[r * width + clamp(c as isize + j as isize - radius, width)])
                .sum();
        }
    }
    for r in 0..height {
        for c in 0..width {
            px[r * width + c] = kernel
                .iter()
                .enumerate()
                .map(|(j, w)| w * tmp[clamp(r as isize + j as isize - radius, height) * width + c])
                .sum();
        }
    }
}

/// Replaces each `block × block` tile by its mean; partial tiles at the
/// border average over the pixels they cover.
fn pixelate(px: &mut [f64], height: usize, width: usize, block: usize) {
    if block <= 1 {
        return;
    }
    for r0 in (0..height).step_by(block) {
        for c0 in (0..width).step_by(block) {
            let rows = r0..(r0 + block).min(height);
            let cols = c0..(c0 + block).min(width);
            let count = (rows.len() * cols.len()) as f64;
            let mean = rows
                .clone()
                .flat_map(|r| cols.clone().map(move |c| (r, c)))
                .map(|(r, c)| px[r * width + c])
                .sum::<f64>()
                / count;
            for r in rows {
                for c in cols.clone() {
                    px[r * width + c] = mean;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GRAY: InputKind = InputKind::Image {
        channels: 1,
        height: 4,
        width: 4,
    };

    fn ramp() -> Tensor {
        Tensor::matrix(2, 16, (0..32).map(|i| (i % 16) as f64 / 20.0 + 0.1).collect()).unwrap()
    }

    #[test]
    fn severity_zero_is_identity_for_every_kind() {
        let x = ramp();
        for kind in CorruptionKind::ALL {
            let y = corrupt(&x, GRAY, CorruptionSpec::new(kind, 0).unwrap(), 3).unwrap();
            assert_eq!(x, y, "{kind}");
        }
    }

    #[test]
    fn outputs_are_clamped() {
        let x = ramp();
        for kind in CorruptionKind::ALL {
            for severity in 1..=5 {
                let y = corrupt(&x, GRAY, CorruptionSpec::new(kind, severity).unwrap(), 1).unwrap();
                assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)), "{kind} s{severity}");
            }
        }
    }

    #[test]
    fn contrast_scales_per_image_deviation() {
        let x = ramp();
        let y = corrupt(&x, GRAY, CorruptionSpec::new(CorruptionKind::Contrast, 5).unwrap(), 0).unwrap();
        for (a, b) in x.row_iter().zip(y.row_iter()) {
            let std = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
            };
            assert!((std(b) / std(a) - 0.15).abs() < 1e-12);
        }
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let x = ramp();
        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 3).unwrap();
        let a = corrupt(&x, GRAY, spec, 11).unwrap();
        let b = corrupt(&x, GRAY, spec, 11).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), x.data());
    }

    #[test]
    fn blur_preserves_constant_images() {
        let x = Tensor::matrix(1, 16, vec![0.3; 16]).unwrap();
        let y = corrupt(&x, GRAY, CorruptionSpec::new(CorruptionKind::GaussianBlur, 5).unwrap(), 0).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        assert_eq!(blur_kernel(0.4).len(), 3);
        assert_eq!(blur_kernel(1.3).len(), 5);
    }

    #[test]
    fn pixelate_averages_blocks() {
        let x = Tensor::matrix(1, 16, (0..16).map(|i| i as f64 / 16.0).collect()).unwrap();
        let y = corrupt(&x, GRAY, CorruptionSpec::new(CorruptionKind::Pixelate, 2).unwrap(), 0).unwrap();
        let expected = (0.0 + 1.0 + 4.0 + 5.0) / 4.0 / 16.0;
        for idx in [0, 1, 4, 5] {
            assert!((y.data()[idx] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_points_and_bad_severity() {
        let x = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        let spec = CorruptionSpec::new(CorruptionKind::Contrast, 1).unwrap();
        assert!(corrupt(&x, InputKind::Points { dim: 2 }, spec, 0).is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Contrast, 6).is_err());
        assert!("fog".parse::<CorruptionKind>().is_err());
        assert_eq!("shot_noise".parse::<CorruptionKind>().unwrap(), CorruptionKind::ShotNoise);
    }
}
