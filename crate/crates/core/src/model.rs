//! The classifier `h = f ∘ g`: a two-layer ReLU feature generator `g` with
//! dropout after each hidden layer, and a linear head `f`.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, sgd_step, softmax_in_place, Graph, ParamSet, Tensor, Var};
use crate::datagen::{Augmenter, DataBundle, InputKind, LabeledSplit};
use crate::error::{invalid, Error, Result};
use crate::rng;

pub const HIDDEN: usize = 64;
pub const DEFAULT_DROPOUT: f64 = 0.1;

const MAGIC: &[u8; 4] = b"SGMD";
const VERSION: u32 = 1;

/// Parameter names in declaration order. Names starting with `g.` belong
/// to the feature generator, `f.` to the head.
pub const PARAM_NAMES: [&str; 6] = ["g.w1", "g.b1", "g.w2", "g.b2", "f.w", "f.b"];

/// Anything that maps an input batch to class logits on a graph. Lets the
/// perturbation code differentiate through models other than [`Hypothesis`].
pub trait Classifier {
    fn num_classes(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// Deterministic (eval-mode) logits for the `[B, input_dim]` batch `x`.
    fn logits_on(&self, graph: &mut Graph, x: Var) -> Result<Var>;

    fn eval_logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.logits_on(&mut g, xv)?;
        Ok(g.value(out)?.clone())
    }

    fn eval_probs(&self, x: &Tensor) -> Result<Tensor> {
        let mut p = self.eval_logits(x)?;
        let k = self.num_classes();
        p.data_mut().chunks_mut(k).for_each(softmax_in_place);
        Ok(p)
    }

    /// Argmax of the probabilities, ties toward the lowest class index.
    fn eval_labels(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.eval_probs(x)?.row_iter().map(argmax).collect())
    }
}

/// Forward-pass behaviour of the feature generator.
pub enum Mode<'a> {
    /// Dropout disabled.
    Eval,
    /// Dropout masks drawn from the given stream.
    Stochastic(&'a mut dyn RngCore),
}

/// Node handles produced by [`Hypothesis::forward`].
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub features: Var,
    pub logits: Var,
}

/// Batch predictions: one probability row and one argmax label per input.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub probs: Tensor,
    pub labels: Vec<usize>,
}

impl Predictions {
    fn from_logits(mut logits: Tensor) -> Self {
        let k = logits.cols().max(1);
        logits.data_mut().chunks_mut(k).for_each(softmax_in_place);
        let labels = logits.row_iter().map(argmax).collect();
        Self { probs: logits, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn max_confidence(&self) -> Vec<f64> {
        self.probs
            .row_iter()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    input_dim: usize,
    k: usize,
    dropout_p: f64,
    params: ParamSet,
}

fn uniform_matrix<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

impl Hypothesis {
    /// Seeded initialization: He-uniform hidden weights, Glorot-uniform head,
    /// zero biases.
    pub fn new(input_dim: usize, k: usize, dropout_p: f64, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, "model.init", 0);
        Self::build(input_dim, k, dropout_p, |rows, cols, he| {
            let bound = if he {
                (6.0 / rows as f64).sqrt()
            } else {
                (6.0 / (rows + cols) as f64).sqrt()
            };
            uniform_matrix(rows, cols, bound, &mut rng)
        })
    }

    /// All parameters zero. Every input then maps to the uniform distribution.
    pub fn zeroed(input_dim: usize, k: usize, dropout_p: f64) -> Result<Self> {
        Self::build(input_dim, k, dropout_p, |rows, cols, _| Tensor::zeros(vec![rows, cols]))
    }

    fn build(
        input_dim: usize,
        k: usize,
        dropout_p: f64,
        mut weight: impl FnMut(usize, usize, bool) -> Tensor,
    ) -> Result<Self> {
        if input_dim == 0 || k < 2 {
            return Err(invalid(format!("need input_dim >= 1 and k >= 2, got {input_dim} and {k}")));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(invalid(format!("dropout probability {dropout_p} outside [0, 1)")));
        }
        let mut params = ParamSet::new();
        params.push("g.w1", weight(input_dim, HIDDEN, true));
        params.push("g.b1", Tensor::zeros(vec![HIDDEN]));
        params.push("g.w2", weight(HIDDEN, HIDDEN, true));
        params.push("g.b2", Tensor::zeros(vec![HIDDEN]));
        params.push("f.w", weight(HIDDEN, k, false));
        params.push("f.b", Tensor::zeros(vec![k]));
        Ok(Self {
            input_dim,
            k,
            dropout_p,
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dropout_p(&self) -> f64 {
        self.dropout_p
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Head parameters `(f.w, f.b)` as flat slices.
    pub fn head(&self) -> (&[f64], &[f64]) {
        let w = self.params.get("f.w").expect("head weight");
        let b = self.params.get("f.b").expect("head bias");
        (w.value.data(), b.value.data())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.input_dim {
            return Err(Error::ShapeMismatch {
                op: "hypothesis input",
                lhs: x.shape().to_vec(),
                rhs: vec![self.input_dim],
            });
        }
        Ok(())
    }

    /// Records `f(g(x))` on `graph` using parameter handles from
    /// [`ParamSet::bind`] or [`ParamSet::bind_constant`].
    pub fn forward(&self, graph: &mut Graph, x: Var, vars: &[Var], mode: Mode<'_>) -> Result<Forward> {
        if vars.len() != PARAM_NAMES.len() {
            return Err(Error::LengthMismatch(vars.len(), PARAM_NAMES.len()));
        }
        let xs = graph.value(x)?.shape().to_vec();
        if xs.len() != 2 || xs[1] != self.input_dim {
            return Err(Error::ShapeMismatch {
                op: "hypothesis input",
                lhs: xs,
                rhs: vec![self.input_dim],
            });
        }
        let mut rng = match mode {
            Mode::Eval => None,
            Mode::Stochastic(r) => Some(r),
        };
        let mut h = x;
        for layer in 0..2 {
            let z = graph.matmul(h, vars[2 * layer])?;
            let z = graph.add(z, vars[2 * layer + 1])?;
            h = graph.relu(z)?;
            if let Some(r) = rng.as_deref_mut() {
                h = graph.dropout(h, self.dropout_p, r)?;
            }
        }
        let logits = graph.matmul(h, vars[4])?;
        let logits = graph.add(logits, vars[5])?;
        Ok(Forward { features: h, logits })
    }

    fn eval_forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let vars = self.params.bind_constant(&mut g);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv, &vars, Mode::Eval)?;
        Ok((g.value(out.features)?.clone(), g.value(out.logits)?.clone()))
    }

    /// `g(x)` with dropout disabled, `[B, 64]`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.eval_forward(x)?.0)
    }

    /// Eval-mode logits, `[B, K]`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.eval_forward(x)?.1)
    }

    /// Eval-mode softmax probabilities and argmax labels (ties to the lowest
    /// class index).
    pub fn predict(&self, x: &Tensor) -> Result<Predictions> {
        Ok(Predictions::from_logits(self.logits(x)?))
    }

    /// Labels only.
    pub fn predict_labels(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.predict(x)?.labels)
    }

    /// Applies the head to precomputed features: `softmax(z·W + b)`.
    pub fn head_probs(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.bind_constant(&mut g);
        let zv = g.constant(z.clone());
        let l = g.matmul(zv, vars[4])?;
        let l = g.add(l, vars[5])?;
        let p = g.softmax(l)?;
        Ok(g.value(p)?.clone())
    }

    /// `n` stochastic forward passes with fresh dropout masks per pass.
    /// Returns one `[B, K]` probability tensor per pass.
    pub fn mc_dropout_predict(&self, x: &Tensor, n: usize, seed: u64) -> Result<Vec<Tensor>> {
        if n < 2 {
            return Err(invalid(format!("MC dropout needs at least 2 passes, got {n}")));
        }
        if self.dropout_p == 0.0 {
            return Err(invalid("MC dropout requires a positive dropout probability"));
        }
        self.check_input(x)?;
        (0..n as u64)
            .map(|pass| {
                let mut rng = rng::stream(seed, "model.mc_dropout", pass);
                let mut g = Graph::new();
                let vars = self.params.bind_constant(&mut g);
                let xv = g.constant(x.clone());
                let out = self.forward(&mut g, xv, &vars, Mode::Stochastic(&mut rng))?;
                let p = g.softmax(out.logits)?;
                Ok(g.value(p)?.clone())
            })
            .collect()
    }

    /// Checkpoint bytes: magic, version, layer dims, dropout rate, then all
    /// parameters as little-endian `f64` in declaration order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = [self.input_dim, HIDDEN, HIDDEN, self.k];
        let mut out = Vec::with_capacity(32 + 8 * self.params.num_values());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.dropout_p.to_le_bytes());
        for p in self.params.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(Error::Format("truncated checkpoint".into()));
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        let version = u32_at(take(4)?);
        if version != VERSION as usize {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n_dims = u32_at(take(4)?);
        if n_dims != 4 {
            return Err(Error::Format(format!("expected 4 layer dims, got {n_dims}")));
        }
        let dims: Vec<usize> = (0..4).map(|_| take(4).map(u32_at)).collect::<Result<_>>()?;
        if dims[1] != HIDDEN || dims[2] != HIDDEN {
            return Err(Error::Format(format!("unsupported hidden widths {:?}", &dims[1..3])));
        }
        let dropout_p = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let mut model = Self::zeroed(dims[0], dims[3], dropout_p).map_err(|e| Error::Format(e.to_string()))?;
        for p in model.params.iter_mut() {
            for v in p.value.data_mut() {
                *v = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
            }
        }
        if !cur.is_empty() {
            return Err(Error::Format(format!("{} trailing checkpoint bytes", cur.len())));
        }
        Ok(model)
    }
}

impl Classifier for Hypothesis {
    fn num_classes(&self) -> usize {
        self.k
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn logits_on(&self, graph: &mut Graph, x: Var) -> Result<Var> {
        let vars = self.params.bind_constant(graph);
        Ok(self.forward(graph, x, &vars, Mode::Eval)?.logits)
    }
}

/// A single affine layer followed by softmax: `softmax(x·W + b)`.
/// Handy as a small, fully transparent model for oracles.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

impl LinearModel {
    pub fn new(weights: Tensor, bias: Vec<f64>) -> Result<Self> {
        if weights.shape().len() != 2 || weights.cols() != bias.len() || bias.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "linear model",
                lhs: weights.shape().to_vec(),
                rhs: vec![bias.len()],
            });
        }
        Ok(Self { weights, bias })
    }
}

impl Classifier for LinearModel {
    fn num_classes(&self) -> usize {
        self.bias.len()
    }

    fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    fn logits_on(&self, graph: &mut Graph, x: Var) -> Result<Var> {
        let w = graph.constant(self.weights.clone());
        let b = graph.constant(Tensor::vector(self.bias.clone()));
        let l = graph.matmul(x, w)?;
        graph.add(l, b)
    }
}

/// Source training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub dropout_p: f64,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 0.05,
            momentum: 0.9,
            batch: 32,
            dropout_p: DEFAULT_DROPOUT,
            label_smoothing: 0.0,
            seed: 0,
        }
    }
}

impl SourceTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("source training needs lr > 0 and momentum in [0, 1)"));
        }
        if self.batch == 0 {
            return Err(invalid("source training batch must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(invalid(format!("label smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(invalid(format!("dropout probability {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

/// Smoothed one-hot targets: `(1 − ε)·onehot + ε/K`.
pub fn smoothed_targets(labels: &[usize], k: usize, smoothing: f64) -> Tensor {
    let mut data = vec![smoothing / k as f64; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        data[i * k + l] += 1.0 - smoothing;
    }
    Tensor::new(vec![labels.len(), k], data).expect("shape matches data")
}

/// Mean cross-entropy between constant soft targets and `softmax(logits)`.
pub fn soft_cross_entropy(graph: &mut Graph, targets: Tensor, logits: Var) -> Result<Var> {
    let rows = targets.rows().max(1);
    let t = graph.constant(targets);
    let logp = graph.log_softmax(logits)?;
    let prod = graph.mul(t, logp)?;
    let total = graph.sum(prod)?;
    graph.scale(total, -1.0 / rows as f64)
}

/// Trains `h_S` on the bundle's labeled source split.
pub fn train_source(bundle: &DataBundle, cfg: &SourceTrainConfig) -> Result<(Hypothesis, Vec<f64>)> {
    train_on_split(bundle.source_train(), bundle.kind(), bundle.k(), cfg)
}

/// Trains a fresh model on `split` with smoothed cross-entropy over weakly
/// augmented mini-batches. Returns the model and the mean loss per epoch.
pub fn train_on_split(
    split: &LabeledSplit,
    kind: InputKind,
    k: usize,
    cfg: &SourceTrainConfig,
) -> Result<(Hypothesis, Vec<f64>)> {
    cfg.validate()?;
    if split.is_empty() {
        return Err(Error::Empty("source training split"));
    }
    if split.inputs.cols() != kind.dim() {
        return Err(Error::ShapeMismatch {
            op: "train_source",
            lhs: split.inputs.shape().to_vec(),
            rhs: vec![kind.dim()],
        });
    }
    let mut model = Hypothesis::new(kind.dim(), k, cfg.dropout_p, cfg.seed)?;
    let augmenter = Augmenter::fit(&split.inputs, kind)?;
    let mut order: Vec<usize> = (0..split.len()).collect();
    let mut shuffle_rng = rng::stream(cfg.seed, "train.shuffle", 0);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let step = rng::derive(cfg.seed, "train.step", (epoch * 1_000_003 + b) as u64);
            let x = augmenter.weak(&split.inputs.select_rows(chunk), step)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| split.labels[i]).collect();
            let mut g = Graph::new();
            let vars = model.params.bind(&mut g);
            let xv = g.constant(x);
            let mut drop_rng = rng::stream(step, "train.dropout", 0);
            let out = model.forward(&mut g, xv, &vars, Mode::Stochastic(&mut drop_rng))?;
            let loss = soft_cross_entropy(&mut g, smoothed_targets(&labels, k, cfg.label_smoothing), out.logits)?;
            g.backward(loss)?;
            epoch_loss += g.value(loss)?.item()? * chunk.len() as f64;
            model.params.collect_grads(&g, &vars)?;
            sgd_step(&mut model.params, cfg.lr, cfg.momentum)?;
        }
        model.params.clear_grads();
        losses.push(epoch_loss / split.len() as f64);
    }
    for p in model.params.iter_mut() {
        p.velocity.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch() -> Tensor {
        Tensor::matrix(3, 2, vec![0.1, -0.4, 1.5, 0.3, -2.0, 0.7]).unwrap()
    }

    #[test]
    fn zeroed_model_predicts_uniform_and_label_zero() {
        let h = Hypothesis::zeroed(2, 3, 0.1).unwrap();
        let p = h.predict(&batch()).unwrap();
        for row in p.probs.row_iter() {
            assert!(row.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
        assert_eq!(p.labels, vec![0, 0, 0]);
    }

    #[test]
    fn composition_identity() {
        let h = Hypothesis::new(2, 4, 0.1, 3).unwrap();
        let x = batch();
        let direct = h.predict(&x).unwrap().probs;
        let composed = h.head_probs(&h.features(&x).unwrap()).unwrap();
        assert_eq!(direct, composed);
        assert!(h.features(&x).unwrap().data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn eval_prediction_is_repeatable_and_normalized() {
        let h = Hypothesis::new(2, 5, 0.2, 1).unwrap();
        let a = h.predict(&batch()).unwrap();
        assert_eq!(a, h.predict(&batch()).unwrap());
        for row in a.probs.row_iter() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mc_dropout_is_seeded_and_validated() {
        let h = Hypothesis::new(2, 3, 0.3, 0).unwrap();
        let a = h.mc_dropout_predict(&batch(), 4, 9).unwrap();
        assert_eq!(a, h.mc_dropout_predict(&batch(), 4, 9).unwrap());
        assert_ne!(a[0], a[1]);
        assert!(h.mc_dropout_predict(&batch(), 1, 9).is_err());
        let no_drop = Hypothesis::new(2, 3, 0.0, 0).unwrap();
        assert!(no_drop.mc_dropout_predict(&batch(), 4, 9).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let h = Hypothesis::new(5, 3, 0.15, 2).unwrap();
        let bytes = h.to_bytes();
        assert_eq!(&bytes[..4], b"SGMD");
        assert_eq!(Hypothesis::from_bytes(&bytes).unwrap(), h);
        assert!(Hypothesis::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let h = Hypothesis::new(3, 2, 0.1, 0).unwrap();
        assert!(h.predict(&batch()).is_err());
    }

    #[test]
    fn smoothing_zero_is_one_hot() {
        let t = smoothed_targets(&[1, 0], 3, 0.0);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let s = smoothed_targets(&[2], 4, 0.2);
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((s.data()[2] - 0.85).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let split = LabeledSplit {
            inputs: batch(),
            labels: vec![0, 1, 1],
        };
        let cfg = SourceTrainConfig { epochs: 0, seed: 7, ..Default::default() };
        let (h, losses) = train_on_split(&split, InputKind::Points { dim: 2 }, 2, &cfg).unwrap();
        assert!(losses.is_empty());
        assert_eq!(h, Hypothesis::new(2, 2, cfg.dropout_p, 7).unwrap());
    }
}
