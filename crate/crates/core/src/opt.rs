//! Adam optimizer with a step-halving learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Halve the learning rate every this many steps; `None` keeps it fixed.
    pub decay_steps: Option<usize>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, decay_steps: None }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.decay_steps != Some(0);
        if !ok {
            return Err(Error::Config(format!("bad optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// First/second-moment state for one parameter list. Parameters must be
/// passed to every `step` call in the same order and with the same shapes.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl Adam {
    pub fn new(cfg: AdamConfig, param_sizes: &[usize]) -> Result<Self> {
        cfg.validate()?;
        Ok(Adam {
            cfg,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// Learning rate that the next `step` call will use.
    pub fn current_lr(&self) -> f64 {
        match self.cfg.decay_steps {
            Some(d) => self.cfg.lr * 0.5f64.powi((self.t / d) as i32),
            None => self.cfg.lr,
        }
    }

    /// One update. A `None` gradient decays that parameter's moments as if
    /// the gradient were zero.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Vec<f64>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(
                "adam",
                format!("expected {} parameters, got {} with {} grads", self.m.len(), params.len(), grads.len()),
            ));
        }
        let lr = self.current_lr();
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if p.len() != self.m[i].len() {
                return Err(Error::contract(
                    "adam",
                    format!("parameter {i} has {} values, state expects {}", p.len(), self.m[i].len()),
                ));
            }
            if let Some(g) = &grads[i] {
                if g.len() != p.len() {
                    return Err(Error::contract(
                        "adam",
                        format!("gradient {i} has {} values, expected {}", g.len(), p.len()),
                    ));
                }
            }
            let zero = vec![];
            let g = grads[i].as_deref().unwrap_or(&zero);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let vals = p.values_mut();
            for k in 0..vals.len() {
                let gk = g.get(k).copied().unwrap_or(0.0);
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                vals[k] -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
                if !vals[k].is_finite() {
                    return Err(Error::NonFinite { op: "adam", step: Some(self.t) });
                }
            }
        }
        Ok(())
    }
}
