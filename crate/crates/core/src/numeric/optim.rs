//! Trainable parameters and the Adam optimiser.

use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

/// A trainable matrix with its gradient accumulator and Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub value: DenseMatrix,
    pub gradient: DenseMatrix,
    adam_m: DenseMatrix,
    adam_v: DenseMatrix,
    step_count: u64,
}

impl Parameter {
    pub fn new(value: DenseMatrix) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            gradient: DenseMatrix::zeros(r, c),
            adam_m: DenseMatrix::zeros(r, c),
            adam_v: DenseMatrix::zeros(r, c),
            step_count: 0,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_step_count(&mut self, steps: u64) {
        self.step_count = steps;
    }

    pub fn accumulate(&mut self, grad: &DenseMatrix) -> Result<()> {
        if grad.shape() != self.value.shape() {
            return Err(Error::dim("accumulate", self.value.shape(), grad.shape()));
        }
        self.gradient.add_assign(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.gradient.fill(0.0);
    }

    /// One bias-corrected Adam update; clears the gradient afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if !self.gradient.is_finite() {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        if cfg.lr.is_nan() || cfg.lr <= 0.0 {
            return Err(Error::Argument(format!("learning rate must be > 0, got {}", cfg.lr)));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let g = self.gradient.as_slice();
        let m = self.adam_m.as_mut_slice();
        let v = self.adam_v.as_mut_slice();
        let w = self.value.as_mut_slice();
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        self.zero_grad();
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Index of a parameter inside a [`ParameterSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of parameters owned by one model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    params: Vec<Parameter>,
    names: Vec<String>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: DenseMatrix) -> ParamId {
        self.params.push(Parameter::new(value));
        self.names.push(name.into());
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &DenseMatrix {
        &self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Parameter)> {
        self.params
            .iter()
            .zip(&self.names)
            .enumerate()
            .map(|(i, (p, n))| (ParamId(i), n.as_str(), p))
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some((_, name, _)) = self.iter().find(|(_, _, p)| !p.gradient.is_finite()) {
            return Err(Error::Divergence(format!("non-finite gradient in {name}")));
        }
        for p in &mut self.params {
            p.adam_step(cfg)?;
        }
        Ok(())
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Parameter::new(DenseMatrix::row_vector(&[0.5, -2.0, 3.0]));
        let before = p.value.clone();
        for _ in 0..10 {
            p.adam_step(&AdamConfig::default()).unwrap();
        }
        assert_eq!(p.value, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Parameter::new(DenseMatrix::scalar(0.0));
        p.gradient = DenseMatrix::scalar(1.0);
        p.adam_step(&AdamConfig::with_lr(0.001)).unwrap();
        assert_abs_diff_eq!(p.value.get(0, 0), -0.001, epsilon = 1e-10);
        assert_eq!(p.gradient.get(0, 0), 0.0);

        let mut q = Parameter::new(DenseMatrix::scalar(0.0));
        q.gradient = DenseMatrix::scalar(-37.0);
        q.adam_step(&AdamConfig::with_lr(0.001)).unwrap();
        assert_abs_diff_eq!(q.value.get(0, 0), 0.001, epsilon = 1e-10);
    }

    #[test]
    fn step_count_increments() {
        let mut p = Parameter::new(DenseMatrix::scalar(1.0));
        p.set_step_count(5);
        p.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(p.step_count(), 6);
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut p = Parameter::new(DenseMatrix::scalar(1.0));
        p.gradient = DenseMatrix::scalar(f64::NAN);
        assert!(matches!(p.adam_step(&AdamConfig::default()), Err(Error::Divergence(_))));
    }

    #[test]
    fn parameter_set_lookup() {
        let mut set = ParameterSet::new();
        let a = set.add("a", DenseMatrix::zeros(2, 2));
        let b = set.add("b", DenseMatrix::zeros(1, 3));
        assert_eq!(set.find("b"), Some(b));
        assert_eq!(set.name(a), "a");
        assert_eq!(set.scalar_count(), 7);
    }
}
