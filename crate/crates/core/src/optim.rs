//! AdamW with decoupled weight decay.

use alloc::format;

use crate::autodiff::Gradients;
use crate::error::{invalid, Error, Result};
use crate::model::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl AdamW {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr > 0.0 && self.lr.is_finite()) || !unit(self.beta1) || !unit(self.beta2) {
            return Err(invalid(format!("bad optimizer settings {self:?}")));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(invalid(format!("bad optimizer settings {self:?}")));
        }
        Ok(())
    }

    /// One update of every parameter that has a gradient. Parameters are
    /// first shrunk by `1 - lr * weight_decay`, then moved by the
    /// bias-corrected Adam direction.
    pub fn step(&self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        params.step += 1;
        let k = params.step as f64;
        let c1 = 1.0 - libm::pow(self.beta1, k);
        let c2 = 1.0 - libm::pow(self.beta2, k);
        for (name, g) in grads {
            let p = params
                .tensors
                .get_mut(name)
                .ok_or_else(|| invalid(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    expected: p.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
            let m = params.first_moment.get_mut(name).expect("moments mirror parameters");
            let v = params.second_moment.get_mut(name).expect("moments mirror parameters");
            let decay = 1.0 - self.lr * self.weight_decay;
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi = *pi * decay - self.lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
        Ok(())
    }
}
