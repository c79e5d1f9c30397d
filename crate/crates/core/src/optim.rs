//! Trainable parameters and SGD with momentum.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::DenseArray;

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: DenseArray,
    pub grad: DenseArray,
    pub momentum: DenseArray,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: DenseArray) -> Self {
        let grad = DenseArray::zeros(value.shape());
        let momentum = DenseArray::zeros(value.shape());
        Self { name: name.into(), value, grad, momentum }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// An ordered, named collection of parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: DenseArray) -> usize {
        self.params.push(Parameter::new(name, value));
        self.params.len() - 1
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Registers every parameter in `graph`, as trainable leaves or as
    /// constants when `trainable` is false.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { graph.leaf(p.value.clone()) } else { graph.constant(p.value.clone()) })
            .collect()
    }

    /// Adds the graph gradients of `vars` (as returned by [`ParamStore::bind`])
    /// into the parameter gradients.
    pub fn accumulate_grads(&mut self, graph: &Graph, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            p.grad.add_assign(&graph.grad(v));
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Zeroes gradients and momentum buffers, keeping the values.
    pub fn clear_state(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
            p.momentum.fill(0.0);
        }
    }
}

/// `v ← momentum·v + grad; p ← p − lr·v`, then zero the gradients.
///
/// A non-finite gradient aborts the step before any parameter changes.
pub fn sgd_step(params: &mut [Parameter], lr: f64, momentum: f64) -> Result<()> {
    if let Some(p) = params.iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient in parameter {}", p.name)));
    }
    for p in params.iter_mut() {
        let Parameter { value, grad, momentum: buf, .. } = p;
        for ((v, g), m) in value.data_mut().iter_mut().zip(grad.data()).zip(buf.data_mut()) {
            *m = momentum * *m + g;
            *v -= lr * *m;
        }
        p.zero_grad();
    }
    Ok(())
}

/// Step schedule: `base` until `drop_epoch`, then `base / 10`. Epochs are
/// counted from 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub base: f64,
    pub drop_epoch: usize,
}

impl StepSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch > self.drop_epoch {
            self.base / 10.0
        } else {
            self.base
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(value: f64, grad: f64) -> Parameter {
        let mut p = Parameter::new("p", DenseArray::scalar(value));
        p.grad = DenseArray::scalar(grad);
        p
    }

    #[test]
    fn vanilla_sgd_without_momentum() {
        let mut ps = [param(1.0, 0.5)];
        sgd_step(&mut ps, 0.1, 0.0).unwrap();
        assert_eq!(ps[0].value.item(), 1.0 - 0.1 * 0.5);
        assert_eq!(ps[0].grad.item(), 0.0);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        let (lr, g) = (0.01, 0.3);
        let mut ps = [param(2.0, g)];
        sgd_step(&mut ps, lr, 0.9).unwrap();
        ps[0].grad = DenseArray::scalar(g);
        sgd_step(&mut ps, lr, 0.9).unwrap();
        // v1 = g, v2 = 0.9 g + g = 1.9 g.
        let expected = 2.0 - lr * (g + 1.9 * g);
        assert!((ps[0].value.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut ps = [param(3.25, 0.0)];
        sgd_step(&mut ps, 0.01, 0.9).unwrap();
        assert_eq!(ps[0].value.item(), 3.25);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut ps = [param(1.0, 0.1), param(2.0, f64::NAN)];
        assert!(matches!(sgd_step(&mut ps, 0.01, 0.9), Err(Error::Numerical(_))));
        assert_eq!(ps[0].value.item(), 1.0);
    }

    #[test]
    fn schedule_drops_after_epoch_thirty() {
        let s = StepSchedule { base: 0.01, drop_epoch: 30 };
        assert_eq!(s.lr_at(1), 0.01);
        assert_eq!(s.lr_at(30), 0.01);
        assert_eq!(s.lr_at(31), 0.001);
        assert_eq!(s.lr_at(50), 0.001);
    }
}
