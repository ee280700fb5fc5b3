//! Synthetic source/target datasets with controllable shift.
//!
//! A [`DataBundle`] owns a labeled source split, a labeled source holdout,
//! and unlabeled target inputs whose labels are kept behind the evaluation
//! gate. Adaptation and the source-free estimators only ever see a
//! [`TargetView`], which exposes neither source samples nor target labels.

mod augment;
mod blobs;
mod corrupt;
mod glyphs;
pub mod io;
mod moons;

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use augment::{augment_strong, augment_weak, Augmenter};
pub use blobs::{make_blobs, make_blobs_with, BlobsConfig};
pub use corrupt::{corrupt, CorruptionKind, CorruptionSpec};
pub use glyphs::{glyph_bitmap, make_glyph_digits, GLYPH_SIZE};
pub use moons::make_two_moons;

use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};
use crate::harness::EvaluationGate;

/// Layout of one input row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputKind {
    Points { dim: usize },
    /// Channel-major `channels × height × width` pixels in `[0, 1]`.
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl InputKind {
    pub fn dim(&self) -> usize {
        match *self {
            InputKind::Points { dim } => dim,
            InputKind::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, InputKind::Image { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSplit {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Snapshot of the bundle's access instrumentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessCounts {
    /// Reads of either source split, over the bundle's lifetime.
    pub source_reads: usize,
    /// Hidden-label reads granted through the evaluation gate.
    pub gated_label_reads: usize,
    /// Source reads attempted while a source-free phase was active.
    pub source_free_source_reads: usize,
    /// Hidden-label reads attempted while a source-free phase was active.
    pub source_free_label_reads: usize,
}

#[derive(Debug, Default)]
struct AccessLog {
    source_reads: AtomicUsize,
    gated_label_reads: AtomicUsize,
    source_free_source_reads: AtomicUsize,
    source_free_label_reads: AtomicUsize,
    source_free: AtomicBool,
}

/// Source splits, unlabeled target inputs and the hidden target labels.
#[derive(Debug)]
pub struct DataBundle {
    kind: InputKind,
    k: usize,
    source_train: LabeledSplit,
    source_holdout: LabeledSplit,
    target: Tensor,
    target_labels: Vec<usize>,
    source_stats: [f64; 3],
    target_stats: [f64; 3],
    access: AccessLog,
}

impl DataBundle {
    pub fn from_parts(
        kind: InputKind,
        k: usize,
        source_train: LabeledSplit,
        source_holdout: LabeledSplit,
        target: Tensor,
        target_labels: Vec<usize>,
    ) -> Result<Self> {
        if k < 2 {
            return Err(invalid(format!("class count must be at least 2, got {k}")));
        }
        for (name, inputs, labels) in [
            ("source_train", &source_train.inputs, &source_train.labels[..]),
            ("source_holdout", &source_holdout.inputs, &source_holdout.labels[..]),
            ("target", &target, &target_labels[..]),
        ] {
            if inputs.shape().len() != 2 || inputs.cols() != kind.dim() {
                return Err(Error::ShapeMismatch {
                    op: name_op(name),
                    lhs: inputs.shape().to_vec(),
                    rhs: vec![kind.dim()],
                });
            }
            if inputs.rows() != labels.len() {
                return Err(Error::LengthMismatch(inputs.rows(), labels.len()));
            }
            if let Some(l) = labels.iter().find(|&&l| l >= k) {
                return Err(invalid(format!("{name} label {l} outside 0..{k}")));
            }
        }
        if source_train.is_empty() || target.rows() == 0 {
            return Err(Error::Empty("source_train or target"));
        }
        let source_stats = channel_std(&source_train.inputs, kind)?;
        let target_stats = channel_std(&target, kind)?;
        Ok(Self {
            kind,
            k,
            source_train,
            source_holdout,
            target,
            target_labels,
            source_stats,
            target_stats,
            access: AccessLog::default(),
        })
    }

    pub fn kind(&self) -> InputKind {
        self.kind
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    pub fn target_len(&self) -> usize {
        self.target_labels.len()
    }

    fn note_source_read(&self) {
        self.access.source_reads.fetch_add(1, Ordering::Relaxed);
        if self.access.source_free.load(Ordering::Relaxed) {
            self.access
                .source_free_source_reads
                .fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn source_train(&self) -> &LabeledSplit {
        self.note_source_read();
        &self.source_train
    }

    pub fn source_holdout(&self) -> &LabeledSplit {
        self.note_source_read();
        &self.source_holdout
    }

    /// Everything a source-free consumer may use.
    pub fn target_view(&self) -> TargetView<'_> {
        TargetView {
            inputs: &self.target,
            kind: self.kind,
            k: self.k,
            source_stats: self.source_stats,
            target_stats: self.target_stats,
        }
    }

    pub fn channel_stats_source(&self) -> [f64; 3] {
        self.source_stats
    }

    pub fn channel_stats_target(&self) -> [f64; 3] {
        self.target_stats
    }

    /// Hidden target labels; requires the harness-only gate token and is
    /// refused while a source-free phase is active.
    pub fn reveal_target_labels(&self, _gate: &EvaluationGate) -> Result<&[usize]> {
        if self.access.source_free.load(Ordering::Relaxed) {
            self.access
                .source_free_label_reads
                .fetch_add(1, Ordering::Relaxed);
            return Err(Error::GateViolation(
                "target labels requested during a source-free phase".into(),
            ));
        }
        self.access.gated_label_reads.fetch_add(1, Ordering::Relaxed);
        Ok(&self.target_labels)
    }

    /// Marks the bundle as being used by source-free code until the guard
    /// is dropped. Any source read or label request in that window is
    /// counted; label requests are refused.
    pub fn source_free_phase(&self) -> SourceFreePhase<'_> {
        self.access.source_free.store(true, Ordering::Relaxed);
        SourceFreePhase { bundle: self }
    }

    pub fn access_counts(&self) -> AccessCounts {
        let l = &self.access;
        AccessCounts {
            source_reads: l.source_reads.load(Ordering::Relaxed),
            gated_label_reads: l.gated_label_reads.load(Ordering::Relaxed),
            source_free_source_reads: l.source_free_source_reads.load(Ordering::Relaxed),
            source_free_label_reads: l.source_free_label_reads.load(Ordering::Relaxed),
        }
    }

    /// Replaces the target inputs (e.g. with a corrupted copy) and
    /// recomputes the target channel statistics.
    pub fn map_target(mut self, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Self> {
        let mapped = f(&self.target)?;
        if mapped.shape() != self.target.shape() {
            return Err(Error::ShapeMismatch {
                op: "map_target",
                lhs: self.target.shape().to_vec(),
                rhs: mapped.shape().to_vec(),
            });
        }
        self.target_stats = channel_std(&mapped, self.kind)?;
        self.target = mapped;
        Ok(self)
    }
}

fn name_op(name: &str) -> &'static str {
    match name {
        "source_train" => "bundle.source_train",
        "source_holdout" => "bundle.source_holdout",
        _ => "bundle.target",
    }
}

/// Guard returned by [`DataBundle::source_free_phase`].
pub struct SourceFreePhase<'a> {
    bundle: &'a DataBundle,
}

impl Drop for SourceFreePhase<'_> {
    fn drop(&mut self) {
        self.bundle.access.source_free.store(false, Ordering::Relaxed);
    }
}

/// Unlabeled target inputs plus the dataset-level statistics a deployed
/// model ships with.
#[derive(Clone, Copy, Debug)]
pub struct TargetView<'a> {
    pub inputs: &'a Tensor,
    pub kind: InputKind,
    pub k: usize,
    /// Per-channel std of the source data, as recorded in the model's
    /// input normalization.
    pub source_stats: [f64; 3],
    pub target_stats: [f64; 3],
}

impl TargetView<'_> {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

/// Population std per colour channel. Single-channel images and point
/// data report one pooled std replicated into all three slots.
pub fn channel_std(inputs: &Tensor, kind: InputKind) -> Result<[f64; 3]> {
    if inputs.rows() == 0 || inputs.is_empty() {
        return Err(Error::Empty("channel_std batch"));
    }
    match kind {
        InputKind::Points { .. } | InputKind::Image { channels: 1, .. } => {
            let s = two_pass_std(inputs.data());
            Ok([s; 3])
        }
        InputKind::Image {
            channels: 3,
            height,
            width,
        } => {
            let plane = height * width;
            let mut out = [0.0; 3];
            for (c, slot) in out.iter_mut().enumerate() {
                let values: Vec<f64> = inputs
                    .row_iter()
                    .flat_map(|row| row[c * plane..(c + 1) * plane].iter().copied())
                    .collect();
                *slot = two_pass_std(&values);
            }
            Ok(out)
        }
        InputKind::Image { channels, .. } => Err(Error::Typology(format!(
            "channel statistics need 1 or 3 channels, got {channels}"
        ))),
    }
}

fn two_pass_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    // Corrected two-pass: the second term cancels the rounding error of `mean`.
    let (sq, lin) = values
        .iter()
        .fold((0.0, 0.0), |(sq, lin), v| (sq + (v - mean).powi(2), lin + (v - mean)));
    ((sq - lin * lin / n) / n).max(0.0).sqrt()
}

/// Shuffles and splits labeled samples 80/20 into train and holdout,
/// keeping at least one sample on each side when possible.
pub(crate) fn split_source<R: rand::Rng>(
    inputs: &Tensor,
    labels: &[usize],
    rng: &mut R,
) -> (LabeledSplit, LabeledSplit) {
    let n = labels.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_train = if n >= 2 { (n * 4 / 5).clamp(1, n - 1) } else { n };
    let (train_idx, hold_idx) = idx.split_at(n_train);
    let make = |ids: &[usize]| LabeledSplit {
        inputs: inputs.select_rows(ids),
        labels: ids.iter().map(|&i| labels[i]).collect(),
    };
    (make(train_idx), make(hold_idx))
}
