//! Adam with bias correction over a flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("adam_beta1", self.beta1), ("adam_beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("adam_eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Moment estimates and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One Adam update of `params` in place. The state is left untouched if
    /// the gradient is rejected.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &AdamConfig, lr: f64) -> Result<()> {
        self.update(params, grad, cfg, |_| lr)
    }

    /// As [`AdamState::step`] with a per-coordinate step size.
    pub fn step_with_rates(&mut self, params: &mut [f64], grad: &[f64], cfg: &AdamConfig, rates: &[f64]) -> Result<()> {
        if rates.len() != self.m.len() {
            return Err(Error::dim("learning rates", self.m.len(), rates.len()));
        }
        self.update(params, grad, cfg, |i| rates[i])
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], cfg: &AdamConfig, lr: impl Fn(usize) -> f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::dim("params", self.m.len(), params.len()));
        }
        if grad.len() != self.m.len() {
            return Err(Error::dim("gradient", self.m.len(), grad.len()));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                term: format!("gradient[{i}]"),
            });
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (i, (((p, g), m), v)) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v).enumerate() {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr(i) * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

/// Functional form: returns the updated state and parameters.
pub fn adam_step(
    state: &AdamState,
    params: &[f64],
    grad: &[f64],
    cfg: &AdamConfig,
) -> Result<(AdamState, Vec<f64>)> {
    let mut s = state.clone();
    let mut p = params.to_vec();
    s.step(&mut p, grad, cfg, cfg.learning_rate)?;
    Ok((s, p))
}
