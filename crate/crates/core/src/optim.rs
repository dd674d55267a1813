use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::Real;

/// Optimizer and schedule settings shared by every training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 1e-4, batch_size: 64, epochs: 80, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::config("optimizer.lr", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("optimizer.batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optimizer.beta", "betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam<S: Real> {
    cfg: OptimConfig,
    step: i32,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Real> Adam<S> {
    pub fn new(cfg: OptimConfig) -> Self {
        Self { cfg, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies one update to `params`, which must be passed in the same order every call.
    pub fn step(&mut self, params: &mut [&mut Param<S>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![S::ZERO; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed between steps");
        if self.cfg.lr == 0.0 {
            return;
        }
        self.step += 1;
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let c1 = S::ONE - b1.powi(self.step);
        let c2 = S::ONE - b2.powi(self.step);
        let lr = S::from_f64(self.cfg.lr);
        let eps = S::from_f64(self.cfg.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data().to_vec();
            for (((w, g), mi), vi) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (S::ONE - b1) * g;
                *vi = b2 * *vi + (S::ONE - b2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
