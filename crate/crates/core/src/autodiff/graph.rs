//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive evaluates eagerly and records itself on the [`Graph`];
//! [`Graph::backward`] then walks the tape in reverse, accumulating
//! gradients into every node that (transitively) depends on a leaf created
//! with `requires_grad = true`. Inputs are leaves like any other, so input
//! gradients come for free.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Lower clamp applied to every argument of `log`.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-pass corruption used as a negative control by the
/// gradient checker.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimitiveFault {
    ReluBackward,
    MatMulBackward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Right operand is a single row repeated over the leading batch dim.
    Rows,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    Relu(Var),
    Dropout(Var, Vec<f64>),
    Softmax(Var),
    LogSoftmax(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SliceRows(Var, usize),
    KlFromLogits {
        input: Var,
        reference_probs: Vec<f64>,
        reference_logits: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<PrimitiveFault>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: PrimitiveFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Leaves with `requires_grad` receive a gradient on
    /// every backward pass, zero if the output does not depend on them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(Error::UnknownVar(v.0))
    }

    /// Gradient of the last backward output with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(Error::UnknownVar(v.0))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        let row_like = match sb {
            [n] => Some(*n),
            [1, n] => Some(*n),
            _ => None,
        };
        match (sa, row_like) {
            ([_, c], Some(n)) if *c == n => Ok(Broadcast::Rows),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            }),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Broadcast) -> Op,
    ) -> Result<Var> {
        let mode = self.broadcast(name, a, b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let cols = tb.len();
        let data: Vec<f64> = match mode {
            Broadcast::Same => ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
            Broadcast::Rows => ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, tb.data()[i % cols]))
                .collect(),
        };
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, make(a, b, mode), rg))
    }

    /// Elementwise sum; `b` may be a single row broadcast over `a`'s batch.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.node(a)?.value.map(|x| x * factor);
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Scale(a, factor), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.node(a)?.value.map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Relu(a), rg))
    }

    /// Inverted dropout: each element is zeroed with probability `p` and the
    /// survivors are scaled by `1 / (1 - p)`. `p == 0` returns `a` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        let input = &self.node(a)?.value;
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..input.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = input.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(input.shape().to_vec(), data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Dropout(a, mask), rg))
    }

    /// Row-wise softmax (a vector is treated as one row).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let input = &self.node(a)?.value;
        let mut data = input.data().to_vec();
        for row in data.chunks_mut(input.cols().max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::new(input.shape().to_vec(), data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let input = &self.node(a)?.value;
        let mut data = input.data().to_vec();
        for row in data.chunks_mut(input.cols().max(1)) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let value = Tensor::new(input.shape().to_vec(), data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::LogSoftmax(a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.node(a)?.value.map(f64::exp);
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Exp(a), rg))
    }

    /// Natural log with the argument clamped below at [`LOG_CLAMP`].
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.node(a)?.value.map(|x| x.max(LOG_CLAMP).ln());
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Log(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.node(a)?.value.data().iter().sum();
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let input = &self.node(a)?.value;
        if input.is_empty() {
            return Err(Error::Empty("mean"));
        }
        let m = input.data().iter().sum::<f64>() / input.len() as f64;
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), rg))
    }

    /// Mean over the leading (batch) dimension: `[B, K] -> [K]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let input = &self.node(a)?.value;
        if input.shape().len() != 2 || input.rows() == 0 {
            return Err(Error::ShapeMismatch {
                op: "mean_rows",
                lhs: input.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (b, k) = (input.rows(), input.cols());
        let mut out = vec![0.0; k];
        for row in input.row_iter() {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= b as f64);
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(a), rg))
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let input = &self.node(a)?.value;
        if input.shape().len() != 2 || start > end || end > input.rows() {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: input.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let c = input.cols();
        let data = input.data()[start * c..end * c].to_vec();
        let value = Tensor::new(vec![end - start, c], data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    /// Sum over rows of `KL(softmax(reference_i) || softmax(logits_i))`.
    ///
    /// The reference logits are constants. The backward pass forms
    /// `q - p` as `p * expm1(delta - L)` so that perturbations far below
    /// the rounding level of the probabilities still yield a usable
    /// gradient direction.
    pub fn kl_from_logits(&mut self, reference_logits: &Tensor, logits: Var) -> Result<Var> {
        let input = &self.node(logits)?.value;
        if input.shape() != reference_logits.shape() {
            return Err(Error::ShapeMismatch {
                op: "kl_from_logits",
                lhs: reference_logits.shape().to_vec(),
                rhs: input.shape().to_vec(),
            });
        }
        let cols = input.cols().max(1);
        let mut probs = reference_logits.data().to_vec();
        for row in probs.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let mut total = 0.0;
        for ((p, z), z_ref) in probs
            .chunks(cols)
            .zip(input.data().chunks(cols))
            .zip(reference_logits.data().chunks(cols))
        {
            let (lse_shift, weighted) = kl_row_terms(p, z, z_ref);
            total += lse_shift - weighted;
        }
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(total.max(0.0)),
            Op::KlFromLogits {
                input: logits,
                reference_probs: probs,
                reference_logits: reference_logits.data().to_vec(),
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar `output` into every gradient-requiring
    /// node. Previous gradients are discarded.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out = self.node(output)?;
        if !out.value.is_scalar() {
            return Err(Error::NonScalarOutput(out.value.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if out.requires_grad {
            grads[output.0] = Some(vec![1.0]);
        }
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let value = &nodes[i].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let corrupt = self.fault == Some(PrimitiveFault::MatMulBackward);
                acc(*a, &mut |da| {
                    // dA += dC · Bᵀ
                    gemm(m, n, k, g, (n, 1), tb.data(), (1, n), da);
                    if corrupt {
                        da.iter_mut().for_each(|x| *x *= 1.01);
                    }
                });
                acc(*b, &mut |db| {
                    // dB += Aᵀ · dC
                    gemm(k, m, n, ta.data(), (1, k), g, (n, 1), db);
                });
            }
            Op::Add(a, b, mode) | Op::Sub(a, b, mode) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                let cols = nodes[b.0].value.len();
                acc(*b, &mut |db| match mode {
                    Broadcast::Same => db.iter_mut().zip(g).for_each(|(d, x)| *d += sign * x),
                    Broadcast::Rows => {
                        for (j, x) in g.iter().enumerate() {
                            db[j % cols] += sign * x;
                        }
                    }
                });
            }
            Op::Mul(a, b, mode) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let cols = tb.len();
                acc(*a, &mut |da| {
                    for (j, d) in da.iter_mut().enumerate() {
                        let bv = match mode {
                            Broadcast::Same => tb.data()[j],
                            Broadcast::Rows => tb.data()[j % cols],
                        };
                        *d += g[j] * bv;
                    }
                });
                acc(*b, &mut |db| {
                    for (j, x) in g.iter().enumerate() {
                        let idx = match mode {
                            Broadcast::Same => j,
                            Broadcast::Rows => j % cols,
                        };
                        db[idx] += x * ta.data()[j];
                    }
                });
            }
            Op::Scale(a, factor) => {
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += factor * x));
            }
            Op::Relu(a) => {
                let input = &nodes[a.0].value;
                let slope = if self.fault == Some(PrimitiveFault::ReluBackward) {
                    1.01
                } else {
                    1.0
                };
                acc(*a, &mut |da| {
                    for ((d, x), gi) in da.iter_mut().zip(input.data()).zip(g) {
                        if *x > 0.0 {
                            *d += slope * gi;
                        }
                    }
                });
            }
            Op::Dropout(a, mask) => {
                acc(*a, &mut |da| {
                    for ((d, m), gi) in da.iter_mut().zip(mask).zip(g) {
                        *d += m * gi;
                    }
                });
            }
            Op::Softmax(a) => {
                let cols = value.cols().max(1);
                acc(*a, &mut |da| {
                    for ((d, y), gr) in da
                        .chunks_mut(cols)
                        .zip(value.data().chunks(cols))
                        .zip(g.chunks(cols))
                    {
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            d[j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let cols = value.cols().max(1);
                acc(*a, &mut |da| {
                    for ((d, y), gr) in da
                        .chunks_mut(cols)
                        .zip(value.data().chunks(cols))
                        .zip(g.chunks(cols))
                    {
                        let total: f64 = gr.iter().sum();
                        for j in 0..cols {
                            d[j] += gr[j] - y[j].exp() * total;
                        }
                    }
                });
            }
            Op::Exp(a) => {
                acc(*a, &mut |da| {
                    for ((d, y), gi) in da.iter_mut().zip(value.data()).zip(g) {
                        *d += y * gi;
                    }
                });
            }
            Op::Log(a) => {
                let input = &nodes[a.0].value;
                acc(*a, &mut |da| {
                    for ((d, x), gi) in da.iter_mut().zip(input.data()).zip(g) {
                        if *x > LOG_CLAMP {
                            *d += gi / x;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::MeanRows(a) => {
                let input = &nodes[a.0].value;
                let (b, k) = (input.rows() as f64, input.cols());
                acc(*a, &mut |da| {
                    for (j, d) in da.iter_mut().enumerate() {
                        *d += g[j % k] / b;
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let offset = start * value.cols();
                acc(*a, &mut |da| {
                    da[offset..offset + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, x)| *d += x);
                });
            }
            Op::KlFromLogits {
                input,
                reference_probs,
                reference_logits,
            } => {
                let z = &nodes[input.0].value;
                let cols = z.cols().max(1);
                acc(*input, &mut |da| {
                    for (((d, p), zr), zq) in da
                        .chunks_mut(cols)
                        .zip(reference_probs.chunks(cols))
                        .zip(reference_logits.chunks(cols))
                        .zip(z.data().chunks(cols))
                    {
                        let (lse_shift, _) = kl_row_terms(p, zq, zr);
                        for j in 0..cols {
                            let delta = zq[j] - zr[j];
                            d[j] += g[0] * p[j] * (delta - lse_shift).exp_m1();
                        }
                    }
                });
            }
        }
    }
}

/// `(L, Σ p·Δ)` for one row where `Δ = z - z_ref` and
/// `L = ln Σ p·exp(Δ)`; KL(p ‖ softmax(z)) = L − Σ p·Δ.
fn kl_row_terms(p: &[f64], z: &[f64], z_ref: &[f64]) -> (f64, f64) {
    let mut shifted = 0.0;
    let mut weighted = 0.0;
    let max_delta = z
        .iter()
        .zip(z_ref)
        .map(|(a, b)| a - b)
        .fold(f64::NEG_INFINITY, f64::max);
    let small = z.iter().zip(z_ref).all(|(a, b)| (a - b).abs() < 1.0);
    for ((pi, zi), ri) in p.iter().zip(z).zip(z_ref) {
        let delta = zi - ri;
        weighted += pi * delta;
        shifted += if small {
            pi * delta.exp_m1()
        } else {
            pi * (delta - max_delta).exp()
        };
    }
    let lse = if small {
        shifted.ln_1p()
    } else {
        max_delta + shifted.ln()
    };
    (lse, weighted)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

/// `c += a · b` with explicit (row, col) strides for `a` and `b`; `c` is
/// dense row-major `m × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe `m × k` and `k × n` views that lie
    // entirely inside `a` and `b`, and `c` holds `m × n` elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_row_by_column() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).unwrap().data(), &[11.0]);
        assert_eq!(g.value(c).unwrap().shape(), &[1, 1]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
    }

    #[test]
    fn relu_and_softmax_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).unwrap().data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::vector(vec![0.0; 3]));
        let s = g.softmax(z).unwrap();
        assert!(close(g.value(s).unwrap().data(), &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let sq = g.mul(w, w).unwrap();
        let out = g.sum(sq).unwrap();
        g.backward(out).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_output_yields_zero_grads() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let c = g.constant(Tensor::vector(vec![5.0, 6.0]));
        let out = g.sum(c).unwrap();
        g.backward(out).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(matches!(g.backward(w), Err(Error::NonScalarOutput(_))));
        assert!(matches!(g.backward(Var(17)), Err(Error::UnknownVar(17))));
    }

    #[test]
    fn broadcast_bias_gradient_sums_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.leaf(Tensor::vector(vec![0.5, -0.5]), true);
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[1.5, 1.5, 3.5, 3.5]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn log_is_clamped() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::vector(vec![0.0, 1.0]), true);
        let l = g.log(p).unwrap();
        assert!((g.value(l).unwrap().data()[0] - LOG_CLAMP.ln()).abs() < 1e-12);
        let s = g.sum(l).unwrap();
        g.backward(s).unwrap();
        let grad = g.grad(p).unwrap();
        assert!(grad.iter().all(|x| x.is_finite()));
        assert_eq!(grad[0], 0.0);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut g = Graph::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let y = g.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn kl_from_logits_matches_direct_formula() {
        let reference = Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 0.0, 0.0, 0.0]).unwrap();
        let moved = Tensor::matrix(2, 3, vec![0.1, -0.5, 1.0, 1.0, 0.0, -2.0]).unwrap();
        let mut g = Graph::new();
        let z = g.leaf(moved.clone(), true);
        let kl = g.kl_from_logits(&reference, z).unwrap();
        let mut expected = 0.0;
        for (r, m) in reference.row_iter().zip(moved.row_iter()) {
            let mut p = r.to_vec();
            softmax_in_place(&mut p);
            let mut q = m.to_vec();
            softmax_in_place(&mut q);
            expected += p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
        }
        assert!((g.value(kl).unwrap().item().unwrap() - expected).abs() < 1e-12);
        g.backward(kl).unwrap();
        // d KL / d z = softmax(z) - p
        let grad = g.grad(z).unwrap();
        for ((r, m), gr) in reference.row_iter().zip(moved.row_iter()).zip(grad.chunks(3)) {
            let mut p = r.to_vec();
            softmax_in_place(&mut p);
            let mut q = m.to_vec();
            softmax_in_place(&mut q);
            for j in 0..3 {
                assert!((gr[j] - (q[j] - p[j])).abs() < 1e-12);
            }
        }
    }
}
