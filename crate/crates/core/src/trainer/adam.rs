use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::networks::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("bad optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam update of one tensor; `t` is the 1-based count of this update.
///
/// Moments are kept in f32 like the parameters; the arithmetic runs in f64.
pub fn adam_step(param: &mut [f32], grad: &[f32], m: &mut [f32], v: &mut [f32], t: u64, hyper: &AdamConfig) {
    debug_assert!(param.len() == grad.len() && m.len() == grad.len() && v.len() == grad.len());
    let AdamConfig { learning_rate: lr, beta1: b1, beta2: b2, eps } = *hyper;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i] as f64;
        let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
        let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let step = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
        param[i] = (param[i] as f64 - step) as f32;
    }
}

/// First and second moments for a group of parameters sharing one step count.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamState {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
    pub t: u64,
}

impl AdamState {
    /// Applies one update to every parameter named in `grads`. Nothing is
    /// touched if any gradient is non-finite.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &[(String, Tensor<f32>)], hyper: &AdamConfig, step: u64) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFinite { what: format!("gradient of {name}"), step });
            }
            let p = params.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(Error::Invalid(format!("gradient of {name} has shape {:?}, parameter {:?}", g.shape(), p.shape())));
            }
        }
        self.t += 1;
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            if self.m.get(name).is_none() {
                self.m.insert(name.clone(), Tensor::zeros(p.shape().to_vec()));
                self.v.insert(name.clone(), Tensor::zeros(p.shape().to_vec()));
            }
            let m = self.m.get_mut(name).expect("inserted").data_mut();
            let v = self.v.get_mut(name).expect("inserted").data_mut();
            adam_step(p.data_mut(), g.data(), m, v, self.t, hyper);
        }
        Ok(())
    }
}
