//! Adam with bias correction and decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0 }
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every `(param, grad, state)` triple in place. All gradients
    /// are checked for finiteness before any parameter is touched.
    pub fn step<T: Real>(&mut self, lr: f64, items: &mut [(&mut [T], &[T], &mut AdamState<T>)]) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        for (i, (p, g, s)) in items.iter().enumerate() {
            if p.len() != g.len() || p.len() != s.m.len() {
                return Err(Error::shape(format!("adam: length mismatch in parameter {i}")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("adam gradient"));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - lr * c.weight_decay;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        for (p, g, s) in items.iter_mut() {
            for k in 0..p.len() {
                let gk = g[k];
                s.m[k] = b1 * s.m[k] + (T::one() - b1) * gk;
                s.v[k] = b2 * s.v[k] + (T::one() - b2) * gk * gk;
                let mhat = s.m[k].as_f64() / bc1;
                let vhat = s.v[k].as_f64() / bc2;
                let decayed = p[k].as_f64() * decay;
                p[k] = T::from_f64(decayed - lr * mhat / (vhat.sqrt() + c.eps));
            }
        }
        Ok(())
    }
}
