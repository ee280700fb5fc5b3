//! JSON experiment configuration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{corrupt, make_blobs_with, make_glyph_digits, make_two_moons, BlobsConfig, CorruptionKind, CorruptionSpec, DataBundle};
use crate::error::{Error, Result};
use crate::estimators::EstimatorId;
use crate::model::{SourceTrainConfig, DEFAULT_DROPOUT, HIDDEN};
use crate::pafa::{PafaConfig, PrototypeSimilarity};
use crate::perturb::PerturbSpec;
use crate::rng;

/// Data generator and its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    TwoMoons {
        n: usize,
        noise_sigma: f64,
    },
    Blobs {
        k: usize,
        dim: usize,
        n: usize,
        #[serde(default = "one")]
        cluster_std: f64,
        #[serde(default = "one")]
        center_spread: f64,
    },
    GlyphDigits {
        n_per_class: usize,
        jitter: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl TaskConfig {
    pub fn name(&self) -> String {
        match self {
            TaskConfig::TwoMoons { .. } => "two_moons".into(),
            TaskConfig::Blobs { k, dim, .. } => format!("blobs_k{k}_d{dim}"),
            TaskConfig::GlyphDigits { .. } => "glyph_digits".into(),
        }
    }
}

/// Distribution shift applied to the target. Each task supports `none`
/// plus the shift family that matches its input type.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShiftConfig {
    #[default]
    None,
    /// Two-moons only.
    Rotation { degrees: f64 },
    /// Blobs only; target means move by `scale` cluster standard deviations.
    MeanShift { scale: f64 },
    /// Image tasks only.
    Corruption { corruption: CorruptionKind, severity: u8 },
}

impl ShiftConfig {
    pub fn label(&self) -> String {
        match self {
            ShiftConfig::None => "none".into(),
            ShiftConfig::Rotation { degrees } => format!("rotation_{degrees}"),
            ShiftConfig::MeanShift { scale } => format!("mean_shift_{scale}"),
            ShiftConfig::Corruption { corruption, severity } => format!("{corruption}_s{severity}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width of both hidden layers; the architecture is fixed, so only
    /// the built-in width is accepted.
    pub hidden: usize,
    pub dropout_p: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: HIDDEN,
            dropout_p: DEFAULT_DROPOUT,
        }
    }
}

/// Source training settings. The seed is derived from the experiment seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceTrainingConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub label_smoothing: f64,
}

impl Default for SourceTrainingConfig {
    fn default() -> Self {
        let d = SourceTrainConfig::default();
        Self {
            epochs: d.epochs,
            lr: d.lr,
            momentum: d.momentum,
            batch: d.batch,
            label_smoothing: d.label_smoothing,
        }
    }
}

impl SourceTrainingConfig {
    pub fn resolve(&self, dropout_p: f64, seed: u64) -> SourceTrainConfig {
        SourceTrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
            batch: self.batch,
            dropout_p,
            label_smoothing: self.label_smoothing,
            seed,
        }
    }
}

/// Adaptation settings. The seed is derived from the experiment seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub alpha: f64,
    pub similarity: PrototypeSimilarity,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        let d = PafaConfig::default();
        Self {
            epochs: d.epochs,
            lr: d.lr,
            momentum: d.momentum,
            batch: d.batch,
            alpha: d.alpha,
            similarity: d.similarity,
        }
    }
}

impl AdaptationConfig {
    pub fn resolve(&self, seed: u64) -> PafaConfig {
        PafaConfig {
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
            batch: self.batch,
            alpha: self.alpha,
            similarity: self.similarity,
            seed,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_siblings() -> usize {
    5
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

fn yes() -> bool {
    true
}

/// A complete experiment: one task and shift, evaluated over several
/// independently trained source models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    #[serde(default)]
    pub shift: ShiftConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub source_training: SourceTrainingConfig,
    #[serde(default)]
    pub pafa: AdaptationConfig,
    pub estimators: Vec<EstimatorId>,
    #[serde(default)]
    pub perturb: PerturbSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_siblings")]
    pub gde_siblings: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// When false, wall times are reported as 0 so reruns are byte-identical.
    #[serde(default = "yes")]
    pub record_wall_time: bool,
}

impl ExperimentConfig {
    /// Parses and validates a configuration. Every failure, including
    /// unknown keys and unknown estimator ids, is an [`Error::Config`].
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("at least one estimator is required".into()));
        }
        if self.estimators.iter().collect::<BTreeSet<_>>().len() != self.estimators.len() {
            return Err(Error::Config("estimator ids must be distinct".into()));
        }
        if self.estimators.contains(&EstimatorId::Gde) && self.gde_siblings < 2 {
            return Err(Error::Config(format!("gde needs at least 2 siblings, got {}", self.gde_siblings)));
        }
        if self.model.hidden != HIDDEN {
            return Err(Error::Config(format!("hidden width is fixed at {HIDDEN}, got {}", self.model.hidden)));
        }
        self.source_training.resolve(self.model.dropout_p, 0).validate().map_err(cfg_err)?;
        self.pafa.resolve(0).validate().map_err(cfg_err)?;
        self.perturb.validate().map_err(cfg_err)?;
        if self.needs_mc_dropout() && self.model.dropout_p == 0.0 {
            return Err(Error::Config("aap needs dropout_p > 0 for Monte-Carlo dropout".into()));
        }
        match (&self.task, &self.shift) {
            (_, ShiftConfig::None)
            | (TaskConfig::TwoMoons { .. }, ShiftConfig::Rotation { .. })
            | (TaskConfig::Blobs { .. }, ShiftConfig::MeanShift { .. })
            | (TaskConfig::GlyphDigits { .. }, ShiftConfig::Corruption { .. }) => {}
            (task, shift) => {
                return Err(Error::Config(format!(
                    "shift {} does not apply to task {}",
                    shift.label(),
                    task.name()
                )))
            }
        }
        if let ShiftConfig::Corruption { corruption, severity } = self.shift {
            CorruptionSpec::new(corruption, severity).map_err(cfg_err)?;
        }
        match self.task {
            TaskConfig::TwoMoons { n, noise_sigma } => {
                if n < 4 || n % 2 != 0 || !(noise_sigma >= 0.0) {
                    return Err(Error::Config(format!("two_moons needs even n >= 4 and noise_sigma >= 0, got n={n}")));
                }
            }
            TaskConfig::Blobs { k, dim, n, cluster_std, center_spread } => {
                if k < 2 || dim < 2 || n < 2 * k || !(cluster_std > 0.0) || !(center_spread >= 0.0) {
                    return Err(Error::Config("blobs need k >= 2, dim >= 2, n >= 2k, cluster_std > 0".into()));
                }
            }
            TaskConfig::GlyphDigits { n_per_class, jitter } => {
                if n_per_class < 2 || !(jitter >= 0.0) {
                    return Err(Error::Config("glyph_digits needs n_per_class >= 2 and jitter >= 0".into()));
                }
            }
        }
        match self.shift {
            ShiftConfig::Rotation { degrees } if !degrees.is_finite() => {
                Err(Error::Config(format!("rotation must be finite, got {degrees}")))
            }
            ShiftConfig::MeanShift { scale } if !(scale >= 0.0) || !scale.is_finite() => {
                Err(Error::Config(format!("mean shift must be non-negative, got {scale}")))
            }
            _ => Ok(()),
        }
    }

    fn needs_mc_dropout(&self) -> bool {
        self.estimators.contains(&EstimatorId::Aap)
    }

    /// True when no configured estimator needs labeled source data.
    pub fn is_source_free(&self) -> bool {
        self.estimators.iter().all(|e| e.is_source_free())
    }

    /// Builds the source/target bundle for one seed.
    pub fn build_bundle(&self, seed: u64) -> Result<DataBundle> {
        let bundle = match (&self.task, &self.shift) {
            (TaskConfig::TwoMoons { n, noise_sigma }, shift) => {
                let degrees = match shift {
                    ShiftConfig::Rotation { degrees } => *degrees,
                    _ => 0.0,
                };
                make_two_moons(*n, *noise_sigma, degrees, seed)?
            }
            (TaskConfig::Blobs { k, dim, n, cluster_std, center_spread }, shift) => {
                let shift_scale = match shift {
                    ShiftConfig::MeanShift { scale } => *scale,
                    _ => 0.0,
                };
                let cfg = BlobsConfig {
                    cluster_std: *cluster_std,
                    center_spread: *center_spread,
                    ..BlobsConfig::new(*k, *dim, *n, shift_scale)
                };
                make_blobs_with(&cfg, seed)?
            }
            (TaskConfig::GlyphDigits { n_per_class, jitter }, shift) => {
                let bundle = make_glyph_digits(*n_per_class, *jitter, seed)?;
                match shift {
                    ShiftConfig::Corruption { corruption, severity } => {
                        let spec = CorruptionSpec::new(*corruption, *severity)?;
                        let kind = bundle.kind();
                        let cseed = rng::derive(seed, "harness.corruption", 0);
                        bundle.map_target(|x| corrupt(x, kind, spec, cseed))?
                    }
                    _ => bundle,
                }
            }
        };
        Ok(bundle)
    }
}
