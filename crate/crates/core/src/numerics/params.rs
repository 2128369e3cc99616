use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::Tensor2D;
use crate::error::{GuardianError, Result};

/// Conventional Adam constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor2D,
    pub grad: Tensor2D,
    m: Tensor2D,
    v: Tensor2D,
    step: u64,
}

impl Param {
    fn new(value: Tensor2D) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            grad: Tensor2D::zeros(r, c),
            m: Tensor2D::zeros(r, c),
            v: Tensor2D::zeros(r, c),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Named trainable tensors with gradient and Adam moment buffers. Iteration
/// order is by name, so every pass over the store is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2D) {
        self.entries.insert(name.into(), Param::new(value));
    }

    /// Glorot-uniform initialization in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_glorot(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let values = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor2D::new(rows, cols, values).expect("glorot values are finite"));
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor2D> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor2D> {
        self.entries.get(name).map(|p| &p.grad)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Replaces a value, keeping gradient and moment buffers.
    pub fn set_value(&mut self, name: &str, value: Tensor2D) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| GuardianError::InvalidArgument(format!("unknown parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(GuardianError::Shape {
                op: "set_value",
                left: p.value.shape(),
                right: value.shape(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn scalar_mut(&mut self, name: &str, index: usize) -> &mut f64 {
        &mut self.entries.get_mut(name).expect("known parameter").value.values_mut()[index]
    }

    pub(crate) fn grad_mut(&mut self, name: &str) -> Option<&mut Tensor2D> {
        self.entries.get_mut(name).map(|p| &mut p.grad)
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor2D) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| GuardianError::InvalidArgument(format!("unknown parameter {name}")))?;
        if p.grad.shape() != delta.shape() {
            return Err(GuardianError::Shape {
                op: "accumulate_grad",
                left: p.grad.shape(),
                right: delta.shape(),
            });
        }
        p.grad.add_assign(delta);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.values_mut().fill(0.0);
        }
    }

    /// Drops Adam moments and step counters, keeping values.
    pub fn reset_optimizer(&mut self) {
        for p in self.entries.values_mut() {
            p.m.values_mut().fill(0.0);
            p.v.values_mut().fill(0.0);
            p.step = 0;
        }
    }

    /// One bias-corrected Adam update over every entry. Gradients are left
    /// in place; the caller zeroes them.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        for p in self.entries.values_mut() {
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            let grads = p.grad.values();
            let (m, v) = (p.m.values_mut(), p.v.values_mut());
            let value = p.value.values_mut();
            for i in 0..grads.len() {
                let g = grads[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}
