use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// A named trainable tensor with its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
    pub velocity: Vec<f64>,
    pub frozen: bool,
}

/// Ordered collection of parameters. Declaration order is the order used
/// for binding, serialization and optimizer updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        let velocity = vec![0.0; value.len()];
        self.params.push(Param {
            name: name.into(),
            value,
            grad: None,
            velocity,
            frozen: false,
        });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Freezes (or unfreezes) every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
        }
    }

    /// Records every parameter as a graph leaf; only unfrozen parameters
    /// request gradients.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| graph.leaf(p.value.clone(), !p.frozen))
            .collect()
    }

    /// Records every parameter as a constant.
    pub fn bind_constant(&self, graph: &mut Graph) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| graph.constant(p.value.clone()))
            .collect()
    }

    /// Copies gradients out of `graph` after a backward pass. `vars` must
    /// come from [`ParamSet::bind`] on the same graph.
    pub fn collect_grads(&mut self, graph: &Graph, vars: &[Var]) -> Result<()> {
        if vars.len() != self.params.len() {
            return Err(Error::LengthMismatch(vars.len(), self.params.len()));
        }
        for (p, v) in self.params.iter_mut().zip(vars) {
            p.grad = graph.grad(*v).map(<[f64]>::to_vec);
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`.
///
/// Frozen parameters are skipped entirely; their values and velocity stay
/// bit-identical. Every unfrozen parameter must carry a gradient.
pub fn sgd_step(params: &mut ParamSet, lr: f64, momentum: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(invalid(format!("learning rate must be positive, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(invalid(format!("momentum must lie in [0, 1), got {momentum}")));
    }
    if let Some(p) = params.iter().find(|p| !p.frozen && p.grad.is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    for p in params.iter_mut().filter(|p| !p.frozen) {
        let grad = p.grad.as_ref().expect("checked above");
        for ((w, v), g) in p.value.data_mut().iter_mut().zip(&mut p.velocity).zip(grad) {
            *v = momentum * *v + g;
            *w -= lr * *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.push("p", Tensor::vector(vec![value]));
        ps.get_mut("p").unwrap().grad = Some(vec![grad]);
        ps
    }

    #[test]
    fn plain_step() {
        let mut ps = single(1.0, 2.0);
        sgd_step(&mut ps, 0.1, 0.0).unwrap();
        assert!((ps.get("p").unwrap().value.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let mut ps = single(0.0, 1.0);
        sgd_step(&mut ps, 1.0, 0.9).unwrap();
        assert_eq!(ps.get("p").unwrap().value.data()[0], -1.0);
        sgd_step(&mut ps, 1.0, 0.9).unwrap();
        assert!((ps.get("p").unwrap().value.data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn frozen_leaf_is_untouched() {
        let mut ps = single(0.25, 3.0);
        ps.set_frozen("p", true);
        let before = ps.clone();
        sgd_step(&mut ps, 0.5, 0.9).unwrap();
        assert_eq!(ps, before);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::vector(vec![1.0]));
        assert!(matches!(sgd_step(&mut ps, 0.1, 0.0), Err(Error::MissingGrad(n)) if n == "w"));
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let mut ps = single(1.0, 1.0);
        assert!(sgd_step(&mut ps, 0.0, 0.0).is_err());
        assert!(sgd_step(&mut ps, 0.1, 1.0).is_err());
    }
}
