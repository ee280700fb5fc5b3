//! Source-free adaptation: trains the feature generator of a copy of the
//! source model on unlabeled target data, with the head frozen, by
//! minimizing prediction entropy, maximizing batch prediction diversity and
//! self-training on prototype pseudo-labels of strongly augmented views.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, sgd_step, softmax_in_place, Graph, Tensor, Var};
use crate::datagen::{Augmenter, InputKind};
use crate::error::{invalid, Error, Result};
use crate::model::{soft_cross_entropy, Hypothesis, Mode};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PafaConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    /// Weight of the self-training term.
    pub alpha: f64,
    pub similarity: PrototypeSimilarity,
    pub seed: u64,
}

impl Default for PafaConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 2e-3,
            momentum: 0.9,
            batch: 64,
            alpha: 0.5,
            similarity: PrototypeSimilarity::Dot,
            seed: 0,
        }
    }
}

impl PafaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(invalid(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if self.batch < 2 {
            return Err(invalid(format!("adaptation batch must be at least 2, got {}", self.batch)));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("adaptation needs lr > 0 and momentum in [0, 1)"));
        }
        Ok(())
    }
}

/// The three terms of the adaptation objective and their weighted total,
/// `total = (ent + div) + alpha * self_train`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// Mean per-sample prediction entropy on weak views.
    pub ent: f64,
    /// `Σ m̄ ln m̄` for the batch-mean prediction `m̄`; equals
    /// `KL(m̄ ‖ uniform) − ln K` and is never positive.
    pub div: f64,
    /// Mean cross-entropy from prototype pseudo-labels to strong-view
    /// predictions.
    pub self_train: f64,
    pub total: f64,
}

/// How features are compared with class prototypes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeSimilarity {
    /// Raw dot product between features and unnormalized prototypes.
    #[default]
    Dot,
    /// Cosine similarity: features and prototypes are L2-normalized first.
    Cosine,
}

fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Soft pseudo-labels from feature prototypes: with prototypes
/// `C = zᵀ q` (one column per class), returns `softmax(z · C)` row-wise.
pub fn prototype_pseudo_labels_from(q: &Tensor, z: &Tensor) -> Result<Tensor> {
    prototype_pseudo_labels_with(q, z, PrototypeSimilarity::Dot)
}

/// [`prototype_pseudo_labels_from`] with a choice of similarity.
pub fn prototype_pseudo_labels_with(q: &Tensor, z: &Tensor, similarity: PrototypeSimilarity) -> Result<Tensor> {
    if q.rows() == 0 {
        return Err(Error::Empty("pseudo-label batch"));
    }
    if q.rows() != z.rows() {
        return Err(Error::LengthMismatch(q.rows(), z.rows()));
    }
    let (b, k, d) = (q.rows(), q.cols(), z.cols());
    let mut feats = z.data().to_vec();
    if similarity == PrototypeSimilarity::Cosine {
        feats.chunks_mut(d.max(1)).for_each(l2_normalize);
    }
    // protos[c * d + j]: prototype of class c, feature j.
    let mut protos = vec![0.0; k * d];
    for i in 0..b {
        let (zi, qi) = (&feats[i * d..(i + 1) * d], q.row(i));
        for (c, qv) in qi.iter().enumerate() {
            for (j, zv) in zi.iter().enumerate() {
                protos[c * d + j] += zv * qv;
            }
        }
    }
    if similarity == PrototypeSimilarity::Cosine {
        protos.chunks_mut(d.max(1)).for_each(l2_normalize);
    }
    let mut out = vec![0.0; b * k];
    for i in 0..b {
        let zi = &feats[i * d..(i + 1) * d];
        let row = &mut out[i * k..(i + 1) * k];
        for (c, slot) in row.iter_mut().enumerate() {
            *slot = zi.iter().zip(&protos[c * d..(c + 1) * d]).map(|(a, p)| a * p).sum::<f64>();
        }
        softmax_in_place(row);
    }
    Tensor::matrix(b, k, out)
}

/// Prototype pseudo-labels for a batch of weak views, computed in eval mode
/// from the current model. The result is a plain tensor (no gradient).
pub fn prototype_pseudo_labels(h: &Hypothesis, weak: &Tensor, similarity: PrototypeSimilarity) -> Result<Tensor> {
    let z = h.features(weak)?;
    let q = h.head_probs(&z)?;
    prototype_pseudo_labels_with(&q, &z, similarity)
}

/// Hard pseudo-labels: the model's own eval-mode argmax on weak views.
pub fn fixmatch_pseudo_label(h: &Hypothesis, weak: &Tensor) -> Result<Vec<usize>> {
    Ok(h.predict(weak)?.probs.row_iter().map(argmax).collect())
}

struct LossGraph {
    graph: Graph,
    params: Vec<Var>,
    total: Var,
    parts: LossParts,
}

fn build_loss(
    h: &Hypothesis,
    weak: &Tensor,
    strong: &Tensor,
    alpha: f64,
    similarity: PrototypeSimilarity,
    seed: u64,
) -> Result<LossGraph> {
    if weak.rows() < 2 {
        return Err(invalid(format!("adaptation loss needs at least 2 samples, got {}", weak.rows())));
    }
    if weak.shape() != strong.shape() {
        return Err(Error::ShapeMismatch {
            op: "pafa_loss",
            lhs: weak.shape().to_vec(),
            rhs: strong.shape().to_vec(),
        });
    }
    let pseudo = prototype_pseudo_labels(h, weak, similarity)?;
    let b = weak.rows() as f64;
    let mut g = Graph::new();
    let params = h.params().bind(&mut g);
    let mut drop_rng = rng::stream(seed, "pafa.dropout", 0);

    let xw = g.constant(weak.clone());
    let lw = h.forward(&mut g, xw, &params, Mode::Stochastic(&mut drop_rng))?.logits;
    let pw = g.softmax(lw)?;
    let logpw = g.log_softmax(lw)?;
    let plogp = g.mul(pw, logpw)?;
    let s = g.sum(plogp)?;
    let ent = g.scale(s, -1.0 / b)?;

    let mean = g.mean_rows(pw)?;
    let logm = g.log(mean)?;
    let mlogm = g.mul(mean, logm)?;
    let div = g.sum(mlogm)?;

    let xs = g.constant(strong.clone());
    let ls = h.forward(&mut g, xs, &params, Mode::Stochastic(&mut drop_rng))?.logits;
    let st = soft_cross_entropy(&mut g, pseudo, ls)?;

    let im = g.add(ent, div)?;
    let weighted = g.scale(st, alpha)?;
    let total = g.add(im, weighted)?;
    let parts = LossParts {
        ent: g.value(ent)?.item()?,
        div: g.value(div)?.item()?,
        self_train: g.value(st)?.item()?,
        total: g.value(total)?.item()?,
    };
    Ok(LossGraph {
        graph: g,
        params,
        total,
        parts,
    })
}

/// Evaluates the adaptation objective on given weak and strong views.
/// Dropout is active (training mode) and drawn from `seed`.
pub fn pafa_loss_on_views(
    h: &Hypothesis,
    weak: &Tensor,
    strong: &Tensor,
    alpha: f64,
    similarity: PrototypeSimilarity,
    seed: u64,
) -> Result<LossParts> {
    Ok(build_loss(h, weak, strong, alpha, similarity, seed)?.parts)
}

/// Evaluates the adaptation objective on `batch`, drawing weak and strong
/// views from `augmenter` with `seed`.
pub fn pafa_loss(
    h: &Hypothesis,
    batch: &Tensor,
    augmenter: &Augmenter,
    alpha: f64,
    similarity: PrototypeSimilarity,
    seed: u64,
) -> Result<LossParts> {
    let weak = augmenter.weak(batch, rng::derive(seed, "pafa.weak", 0))?;
    let strong = augmenter.strong(batch, rng::derive(seed, "pafa.strong", 0))?;
    pafa_loss_on_views(h, &weak, &strong, alpha, similarity, seed)
}

/// Gradients of the objective for every parameter of `h` (zero for frozen
/// ones) alongside the loss parts.
pub fn pafa_gradients(
    h: &Hypothesis,
    weak: &Tensor,
    strong: &Tensor,
    alpha: f64,
    similarity: PrototypeSimilarity,
    seed: u64,
) -> Result<(LossParts, Vec<Option<Vec<f64>>>)> {
    let mut lg = build_loss(h, weak, strong, alpha, similarity, seed)?;
    lg.graph.backward(lg.total)?;
    let grads = lg.params.iter().map(|v| lg.graph.grad(*v).map(<[f64]>::to_vec)).collect();
    Ok((lg.parts, grads))
}

/// Per-epoch record of the adaptation run.
pub type LossTrace = Vec<LossParts>;

/// `adapt_with` without an observer.
pub fn adapt(h_s: &Hypothesis, target: &Tensor, kind: InputKind, cfg: &PafaConfig) -> Result<(Hypothesis, LossTrace)> {
    adapt_with(h_s, target, kind, cfg, |_, _| Ok(()))
}

/// Adapts a deep copy of `h_s` to `target` with the head frozen.
///
/// `observer` is called after every epoch with the 1-based epoch number and
/// the current model. Batches smaller than two samples are skipped.
pub fn adapt_with(
    h_s: &Hypothesis,
    target: &Tensor,
    kind: InputKind,
    cfg: &PafaConfig,
    mut observer: impl FnMut(usize, &Hypothesis) -> Result<()>,
) -> Result<(Hypothesis, LossTrace)> {
    cfg.validate()?;
    if target.rows() < 2 {
        return Err(Error::Empty("adaptation target (need at least 2 samples)"));
    }
    let mut h_t = h_s.clone();
    for p in h_t.params_mut().iter_mut() {
        p.velocity.iter_mut().for_each(|v| *v = 0.0);
        p.grad = None;
    }
    h_t.params_mut().set_frozen("g.", false);
    h_t.params_mut().set_frozen("f.", true);
    let augmenter = Augmenter::fit(target, kind)?;
    let mut order: Vec<usize> = (0..target.rows()).collect();
    let mut shuffle_rng = rng::stream(cfg.seed, "pafa.shuffle", 0);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut acc = LossParts::default();
        let mut seen = 0usize;
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let step = rng::derive(cfg.seed, "pafa.step", (epoch * 1_000_003 + b) as u64);
            let batch = target.select_rows(chunk);
            let weak = augmenter.weak(&batch, rng::derive(step, "pafa.weak", 0))?;
            let strong = augmenter.strong(&batch, rng::derive(step, "pafa.strong", 0))?;
            let mut lg = build_loss(&h_t, &weak, &strong, cfg.alpha, cfg.similarity, step)?;
            lg.graph.backward(lg.total)?;
            h_t.params_mut().collect_grads(&lg.graph, &lg.params)?;
            sgd_step(h_t.params_mut(), cfg.lr, cfg.momentum)?;
            let w = chunk.len() as f64;
            acc.ent += w * lg.parts.ent;
            acc.div += w * lg.parts.div;
            acc.self_train += w * lg.parts.self_train;
            acc.total += w * lg.parts.total;
            seen += chunk.len();
        }
        h_t.params_mut().clear_grads();
        if seen > 0 {
            let n = seen as f64;
            trace.push(LossParts {
                ent: acc.ent / n,
                div: acc.div / n,
                self_train: acc.self_train / n,
                total: acc.total / n,
            });
        }
        observer(epoch + 1, &h_t)?;
    }
    for p in h_t.params_mut().iter_mut() {
        p.velocity.iter_mut().for_each(|v| *v = 0.0);
        p.frozen = false;
    }
    Ok((h_t, trace))
}

/// Writes the loss trace as CSV with columns `epoch,ent,div,self_train,total`.
pub fn write_trace_csv<W: Write>(w: W, trace: &[LossParts]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "ent", "div", "self_train", "total"])?;
    for (i, p) in trace.iter().enumerate() {
        out.write_record([
            (i + 1).to_string(),
            p.ent.to_string(),
            p.div.to_string(),
            p.self_train.to_string(),
            p.total.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn engineered_prototypes() {
        let q = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let z = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let pl = prototype_pseudo_labels_from(&q, &z).unwrap();
        let e = 1f64.exp();
        assert!((pl.row(0)[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((pl.row(0)[0] - 0.7311).abs() < 1e-4);
        assert!((pl.row(1)[1] - e / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn uniform_predictions_give_uniform_pseudo_labels() {
        let q = Tensor::matrix(4, 3, vec![1.0 / 3.0; 12]).unwrap();
        let z = Tensor::matrix(4, 2, [0.4, 1.1].repeat(4)).unwrap();
        let pl = prototype_pseudo_labels_from(&q, &z).unwrap();
        assert!(pl.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        assert!(prototype_pseudo_labels_from(&Tensor::zeros(vec![0, 3]), &Tensor::zeros(vec![0, 2])).is_err());
    }

    #[test]
    fn zero_model_loss_is_alpha_ln_k() {
        let h = Hypothesis::zeroed(2, 4, 0.1).unwrap();
        let x = Tensor::matrix(3, 2, vec![0.1, 0.2, -1.0, 0.5, 2.0, 1.0]).unwrap();
        let parts = pafa_loss_on_views(&h, &x, &x, 0.5, PrototypeSimilarity::Dot, 0).unwrap();
        let ln4 = 4f64.ln();
        assert!((parts.ent - ln4).abs() < 1e-12);
        assert!((parts.div + ln4).abs() < 1e-12);
        assert!((parts.self_train - ln4).abs() < 1e-12);
        assert!((parts.total - 0.5 * ln4).abs() < 1e-12);
    }

    #[test]
    fn decomposition_is_exact_and_head_gets_no_gradient() {
        let mut h = Hypothesis::new(2, 3, 0.1, 4).unwrap();
        h.params_mut().set_frozen("f.", true);
        let x = Tensor::matrix(4, 2, vec![0.1, 0.2, -1.0, 0.5, 2.0, 1.0, 0.0, -0.3]).unwrap();
        let strong = x.map(|v| v * 1.1);
        let (parts, grads) = pafa_gradients(&h, &x, &strong, 0.7, PrototypeSimilarity::Dot, 1).unwrap();
        assert_eq!(parts.total, (parts.ent + parts.div) + 0.7 * parts.self_train);
        assert!(parts.div <= 0.0);
        assert!(grads[4].is_none() && grads[5].is_none());
        assert!(grads[0].as_ref().unwrap().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn rejects_single_sample_batches() {
        let h = Hypothesis::new(2, 3, 0.1, 4).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.1, 0.2]).unwrap();
        assert!(pafa_loss_on_views(&h, &x, &x, 0.5, PrototypeSimilarity::Dot, 0).is_err());
        assert!(PafaConfig { batch: 1, ..Default::default() }.validate().is_err());
        assert!(PafaConfig { alpha: -0.1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn zero_epochs_is_a_bitwise_copy() {
        let h = Hypothesis::new(2, 2, 0.1, 8).unwrap();
        let x = Tensor::matrix(4, 2, vec![0.1, 0.2, -1.0, 0.5, 2.0, 1.0, 0.0, -0.3]).unwrap();
        let cfg = PafaConfig { epochs: 0, ..Default::default() };
        let (t, trace) = adapt(&h, &x, InputKind::Points { dim: 2 }, &cfg).unwrap();
        assert_eq!(t.to_bytes(), h.to_bytes());
        assert!(trace.is_empty());
    }

    #[test]
    fn head_is_untouched_by_adaptation() {
        let h = Hypothesis::new(2, 2, 0.1, 8).unwrap();
        let before = h.to_bytes();
        let x = Tensor::matrix(6, 2, vec![0.1, 0.2, -1.0, 0.5, 2.0, 1.0, 0.0, -0.3, 0.7, 0.7, -0.2, 1.4]).unwrap();
        let cfg = PafaConfig { epochs: 3, batch: 4, lr: 0.05, ..Default::default() };
        let (t, trace) = adapt(&h, &x, InputKind::Points { dim: 2 }, &cfg).unwrap();
        assert_eq!(h.to_bytes(), before);
        assert_eq!(t.head(), h.head());
        assert_ne!(t.params().get("g.w1"), h.params().get("g.w1"));
        assert_eq!(trace.len(), 3);
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &[LossParts { ent: 1.0, div: -1.0, self_train: 0.5, total: 0.25 }]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "epoch,ent,div,self_train,total\n1,1,-1,0.5,0.25\n");
    }
}
