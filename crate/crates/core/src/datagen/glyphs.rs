use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{split_source, DataBundle, InputKind};
use crate::autodiff::Tensor;
use crate::error::{invalid, Result};
use crate::rng;

pub const GLYPH_SIZE: usize = 8;

/// Maximum sub-pixel offset applied per axis when rendering.
const MAX_SHIFT: f64 = 1.0;

#[rustfmt::skip]
const FONT: [[&str; GLYPH_SIZE]; 10] = [
    ["..####..", ".##..##.", ".##.###.", ".###.##.", ".##..##.", ".##..##.", "..####..", "........"],
    ["...##...", "..###...", "...##...", "...##...", "...##...", "...##...", ".######.", "........"],
    ["..####..", ".##..##.", ".....##.", "....##..", "...##...", "..##....", ".######.", "........"],
    ["..####..", ".##..##.", ".....##.", "...###..", ".....##.", ".##..##.", "..####..", "........"],
    ["....##..", "...###..", "..####..", ".##.##..", ".######.", "....##..", "....##..", "........"],
    [".######.", ".##.....", ".#####..", ".....##.", ".....##.", ".##..##.", "..####..", "........"],
    ["..####..", ".##.....", ".##.....", ".#####..", ".##..##.", ".##..##.", "..####..", "........"],
    [".######.", ".....##.", "....##..", "...##...", "..##....", "..##....", "..##....", "........"],
    ["..####..", ".##..##.", ".##..##.", "..####..", ".##..##.", ".##..##.", "..####..", "........"],
    ["..####..", ".##..##.", ".##..##.", "..#####.", ".....##.", "....##..", "..###...", "........"],
];

/// The built-in 8×8 bitmap for `digit` as row-major 0/1 values.
pub fn glyph_bitmap(digit: usize) -> [f64; GLYPH_SIZE * GLYPH_SIZE] {
    let mut out = [0.0; GLYPH_SIZE * GLYPH_SIZE];
    for (r, row) in FONT[digit].iter().enumerate() {
        for (c, ch) in row.bytes().enumerate() {
            if ch == b'#' {
                out[r * GLYPH_SIZE + c] = 1.0;
            }
        }
    }
    out
}

fn pixel(bitmap: &[f64], r: isize, c: isize) -> f64 {
    let n = GLYPH_SIZE as isize;
    if r < 0 || c < 0 || r >= n || c >= n {
        0.0
    } else {
        bitmap[(r * n + c) as usize]
    }
}

/// Bilinear resampling of `bitmap` translated by `(dy, dx)` pixels.
fn translate(bitmap: &[f64], dy: f64, dx: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(GLYPH_SIZE * GLYPH_SIZE);
    for r in 0..GLYPH_SIZE {
        for c in 0..GLYPH_SIZE {
            let (sy, sx) = (r as f64 - dy, c as f64 - dx);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let v = (1.0 - fy) * ((1.0 - fx) * pixel(bitmap, y0, x0) + fx * pixel(bitmap, y0, x0 + 1))
                + fy * ((1.0 - fx) * pixel(bitmap, y0 + 1, x0) + fx * pixel(bitmap, y0 + 1, x0 + 1));
            out.push(v);
        }
    }
    out
}

fn render<R: Rng>(n_per_class: usize, jitter: f64, rng: &mut R) -> Result<(Tensor, Vec<usize>)> {
    let noise = Normal::new(0.0, jitter).map_err(|e| invalid(e.to_string()))?;
    let dim = GLYPH_SIZE * GLYPH_SIZE;
    let mut data = Vec::with_capacity(10 * n_per_class * dim);
    let mut labels = Vec::with_capacity(10 * n_per_class);
    for digit in 0..10 {
        let bitmap = glyph_bitmap(digit);
        for _ in 0..n_per_class {
            let dy = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);
            let dx = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);
            for v in translate(&bitmap, dy, dx) {
                let jittered = if jitter > 0.0 { v + noise.sample(rng) } else { v };
                data.push(jittered.clamp(0.0, 1.0));
            }
            labels.push(digit);
        }
    }
    Ok((Tensor::matrix(labels.len(), dim, data)?, labels))
}

/// 8×8 grayscale digits rendered from the built-in font with random
/// sub-pixel translation and additive Gaussian jitter, clamped to `[0, 1]`.
/// The target split is a fresh draw from the same generator; callers apply
/// a corruption to it to induce shift.
pub fn make_glyph_digits(n_per_class: usize, jitter: f64, seed: u64) -> Result<DataBundle> {
    if n_per_class < 2 {
        return Err(invalid(format!("glyph digits need n_per_class >= 2, got {n_per_class}")));
    }
    if !(jitter >= 0.0) || !jitter.is_finite() {
        return Err(invalid(format!("jitter must be non-negative, got {jitter}")));
    }
    let (src, src_labels) = render(n_per_class, jitter, &mut rng::stream(seed, "glyphs.source", 0))?;
    let (train, holdout) = split_source(&src, &src_labels, &mut rng::stream(seed, "glyphs.split", 0));
    let (target, target_labels) = render(n_per_class, jitter, &mut rng::stream(seed, "glyphs.target", 0))?;
    let kind = InputKind::Image {
        channels: 1,
        height: GLYPH_SIZE,
        width: GLYPH_SIZE,
    };
    DataBundle::from_parts(kind, 10, train, holdout, target, target_labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn font_glyphs_are_distinct() {
        for a in 0..10 {
            for b in (a + 1)..10 {
                assert_ne!(glyph_bitmap(a), glyph_bitmap(b), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn integer_translation_moves_pixels() {
        let g = glyph_bitmap(1);
        let moved = translate(&g, 0.0, 1.0);
        for r in 0..GLYPH_SIZE {
            for c in 1..GLYPH_SIZE {
                assert_eq!(moved[r * GLYPH_SIZE + c], g[r * GLYPH_SIZE + c - 1]);
            }
        }
    }

    #[test]
    fn noiseless_samples_are_translates_of_their_glyph() {
        let (x, labels) = render(2, 0.0, &mut rng::stream(5, "t", 0)).unwrap();
        for (row, &digit) in x.row_iter().zip(&labels) {
            let g = glyph_bitmap(digit);
            // Bilinear translation preserves total ink unless ink leaves the
            // frame, and never adds ink where the glyph has none nearby.
            let ink: f64 = row.iter().sum();
            let total: f64 = g.iter().sum();
            assert!(ink <= total + 1e-9);
            assert!(ink > 0.5 * total);
        }
        assert_eq!(labels.iter().filter(|&&l| l == 3).count(), 2);
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        for jitter in [0.0, 0.05, 0.5, 2.0] {
            let b = make_glyph_digits(3, jitter, 1).unwrap();
            assert!(b.target_view().inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(b.source_train().inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(make_glyph_digits(1, 0.0, 0).is_err());
        assert!(make_glyph_digits(4, -0.1, 0).is_err());
    }
}
