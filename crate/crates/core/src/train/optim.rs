//! Adam with per-parameter learning rates, optional global-norm clipping and
//! serializable moment estimates.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient of decaying parameters.
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip: None,
        }
    }
}

/// One trainable parameter as seen by the optimizer.
#[derive(Clone, Debug)]
pub struct Slot {
    pub name: String,
    pub var: Var,
    pub lr: f64,
    pub decay: bool,
}

#[derive(Clone, Debug)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

/// Global L2 norm over the gradients present for `slots`.
pub fn grad_norm(slots: &[Slot], grads: &GradStore) -> Result<f64> {
    let mut total = 0.0;
    for s in slots {
        if let Some(g) = grads.get(s.var.as_tensor()) {
            total += g
                .sqr()?
                .sum_all()?
                .to_dtype(candle_core::DType::F64)?
                .to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    /// Returns the pre-clipping gradient norm.
    pub fn update(&mut self, slots: &[Slot], grads: &GradStore) -> Result<f64> {
        let norm = grad_norm(slots, grads)?;
        if !norm.is_finite() {
            return Err(Error::numeric(
                "optimizer",
                format!("gradient norm is {norm}"),
            ));
        }
        let scale = match self.cfg.grad_clip {
            Some(c) if norm > c => c / (norm + 1e-6),
            _ => 1.0,
        };
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for s in slots {
            let Some(g) = grads.get(s.var.as_tensor()) else {
                continue;
            };
            let theta = s.var.as_tensor();
            let mut g = (g * scale)?;
            if s.decay && self.cfg.weight_decay > 0.0 {
                g = (g + (theta * self.cfg.weight_decay)?)?;
            }
            let prev = match self.moments.get(&s.name) {
                Some(m) => m.clone(),
                None => Moments {
                    m: theta.zeros_like()?,
                    v: theta.zeros_like()?,
                },
            };
            let m = ((prev.m * b1)? + (&g * (1.0 - b1))?)?;
            let v = ((prev.v * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + self.cfg.eps)?;
            let delta = ((&m / bc1)? / denom)?;
            s.var.set(&(theta - (delta * s.lr)?)?)?;
            self.moments.insert(s.name.clone(), Moments { m, v });
        }
        Ok(norm)
    }
}
