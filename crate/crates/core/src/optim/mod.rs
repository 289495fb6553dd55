//! Momentum SGD and gradient accumulation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{with_real, Param};
use crate::tensor::{same_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for SgdConfig {
    fn default() -> SgdConfig {
        SgdConfig { lr: 0.01, momentum: 0.9, weight_decay: 0.0 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::InvalidArgument(format!("learning rate {} must be finite and positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!("weight decay {} must be non-negative", self.weight_decay)));
        }
        Ok(())
    }
}

/// `g = grad + wd * W; v = mu * v - lr * g; W += v`, one velocity per
/// learnable tensor, created lazily on the first step.
#[derive(Clone, Debug)]
pub struct MomentumSgd {
    cfg: SgdConfig,
    velocity: Vec<Tensor>,
}

impl MomentumSgd {
    pub fn new(cfg: SgdConfig) -> Result<MomentumSgd> {
        cfg.validate()?;
        Ok(MomentumSgd { cfg, velocity: Vec::new() })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        SgdConfig { lr, ..self.cfg }.validate()?;
        self.cfg.lr = lr;
        Ok(())
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Update every learnable parameter from its `grad`. Non-learnable
    /// entries are skipped.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>) -> Result<()> {
        self.cfg.validate()?;
        let params: Vec<&mut Param> = params.into_iter().filter(|p| p.learnable).collect();
        if self.velocity.is_empty() {
            self.velocity =
                params.iter().map(|p| Tensor::zeros(p.value.shape(), p.value.dtype())).collect::<Result<_>>()?;
        }
        if self.velocity.len() != params.len() {
            return Err(Error::shape(format!("{} parameters for {} velocities", params.len(), self.velocity.len())));
        }
        for (p, v) in params.iter().zip(&self.velocity) {
            if !same_shape(p.grad.shape(), p.value.shape()) || !same_shape(v.shape(), p.value.shape()) {
                return Err(Error::shape(format!(
                    "parameter `{}` {:?} with gradient {:?}",
                    p.name,
                    p.value.shape(),
                    p.grad.shape()
                )));
            }
        }
        let SgdConfig { lr, momentum, weight_decay } = self.cfg;
        for (p, v) in params.into_iter().zip(&mut self.velocity) {
            let Param { value, grad, .. } = p;
            with_real!(value.dtype(), "sgd", T => {
                let (lr, mu, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
                let g = grad.data::<T>()?;
                let vs = v.data_mut::<T>()?;
                for ((w, vi), &gi) in value.data_mut::<T>()?.iter_mut().zip(vs.iter_mut()).zip(g) {
                    let gi = if weight_decay == 0.0 { gi } else { gi + wd * *w };
                    *vi = mu * *vi - lr * gi;
                    *w += *vi;
                }
                Ok::<(), Error>(())
            })?;
        }
        Ok(())
    }
}

/// Running weighted sum of gradient lists, for micro-batching and for
/// combining worker gradients.
#[derive(Clone, Debug, Default)]
pub struct GradientBuffer {
    sums: Vec<Tensor>,
}

impl GradientBuffer {
    /// Zeroed buffers shaped like `like`.
    pub fn zeros_like<'a>(like: impl IntoIterator<Item = &'a Tensor>) -> Result<GradientBuffer> {
        let sums = like.into_iter().map(|t| Tensor::zeros(t.shape(), t.dtype())).collect::<Result<_>>()?;
        Ok(GradientBuffer { sums })
    }

    pub fn zero(&mut self) -> Result<()> {
        for s in &mut self.sums {
            *s = Tensor::zeros(s.shape(), s.dtype())?;
        }
        Ok(())
    }

    /// `sum_i += scale * grads_i`.
    pub fn accumulate<'a>(&mut self, grads: impl IntoIterator<Item = &'a Tensor>, scale: f64) -> Result<()> {
        let grads: Vec<&Tensor> = grads.into_iter().collect();
        if grads.len() != self.sums.len() {
            return Err(Error::shape(format!("{} gradients for {} buffers", grads.len(), self.sums.len())));
        }
        for (s, g) in self.sums.iter_mut().zip(grads) {
            if !same_shape(s.shape(), g.shape()) || s.dtype() != g.dtype() {
                return Err(Error::shape(format!("gradient {:?} into buffer {:?}", g.shape(), s.shape())));
            }
            with_real!(s.dtype(), "accumulate", T => {
                let k = T::lit(scale);
                for (a, &b) in s.data_mut::<T>()?.iter_mut().zip(g.data::<T>()?) {
                    *a += k * b;
                }
                Ok::<(), Error>(())
            })?;
        }
        Ok(())
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.sums
    }

    pub fn into_grads(self) -> Vec<Tensor> {
        self.sums
    }

    /// Copy the sums into the `grad` slots of the learnable parameters.
    pub fn store<'a>(&self, params: impl IntoIterator<Item = &'a mut Param>) -> Result<()> {
        let params: Vec<&mut Param> = params.into_iter().filter(|p| p.learnable).collect();
        if params.len() != self.sums.len() {
            return Err(Error::shape(format!("{} parameters for {} buffers", params.len(), self.sums.len())));
        }
        for (p, s) in params.into_iter().zip(&self.sums) {
            p.grad = s.reshape(p.value.shape())?;
        }
        Ok(())
    }
}
