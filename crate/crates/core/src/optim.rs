//! Adam with per-parameter decay flags and mask gating.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pruning::MaskSet;
use crate::tape::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a [`ParamSet`]. Weight decay is added to the gradient for
/// parameters whose `decay` flag is set (weights and biases; masks are
/// updated elsewhere and never decay). When a mask set is supplied,
/// entries whose mask value is zero are fully frozen: neither the
/// moments nor the weight move, so a pruned weight never changes.
pub struct Adam {
    lr: f64,
    weight_decay: f64,
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64, cfg: AdamConfig, params: &ParamSet) -> Result<Self> {
        if lr <= 0.0 {
            return Err(Error::Invalid(format!(
                "learning rate {lr} must be positive"
            )));
        }
        if weight_decay < 0.0 {
            return Err(Error::Invalid(format!(
                "weight decay {weight_decay} must be non-negative"
            )));
        }
        Ok(Self {
            lr,
            weight_decay,
            cfg,
            t: 0,
            m: params
                .params
                .iter()
                .map(|p| vec![0.0; p.value.len()])
                .collect(),
            v: params
                .params
                .iter()
                .map(|p| vec![0.0; p.value.len()])
                .collect(),
        })
    }

    pub fn step(&mut self, set: &mut ParamSet, masks: Option<&MaskSet>) -> Result<()> {
        if set.len() != self.m.len() {
            return Err(Error::Invalid(
                "optimizer built for a different parameter set".into(),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (i, p) in set.params.iter_mut().enumerate() {
            let mask = masks.and_then(|ms| ms.values(i));
            let grads = p.grad.data();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let decay = if p.decay { self.weight_decay } else { 0.0 };
            let values = p.value.data_mut();
            for idx in 0..values.len() {
                if let Some(mk) = mask {
                    if mk[idx] == 0.0 {
                        continue;
                    }
                }
                let g = grads[idx] + decay * values[idx];
                m[idx] = self.cfg.beta1 * m[idx] + (1.0 - self.cfg.beta1) * g;
                v[idx] = self.cfg.beta2 * v[idx] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[idx] / bc1;
                let v_hat = v[idx] / bc2;
                values[idx] -= self.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
