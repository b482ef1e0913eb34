//! Adam with per-tensor, optionally per-column, learning rates.
//!
//! Parameters and both moment estimates are rounded to single precision
//! after every update, so a checkpoint written in float32 holds the exact
//! optimizer state and a resumed run continues bit for bit.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("invalid Adam settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Optional per-column learning rates, indexed like the parameters.
    pub column_lr: Vec<Option<Vec<f64>>>,
}

#[inline]
fn f32r(x: f64) -> f64 {
    x as f32 as f64
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        Self { cfg, step: 0, m: params.zeros_like(), v: params.zeros_like(), column_lr: vec![None; params.len()] }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        for i in 0..params.len() {
            let g = &grads[i];
            let p = params.tensor_mut(i);
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let cols = p.cols.max(1);
            for e in 0..p.data.len() {
                let lr = match &self.column_lr[i] {
                    Some(c) => c[e % cols],
                    None => self.cfg.lr,
                };
                let m = f32r(b1 * self.m[i].data[e] + (1.0 - b1) * g.data[e]);
                let v = f32r(b2 * self.v[i].data[e] + (1.0 - b2) * g.data[e] * g.data[e]);
                self.m[i].data[e] = m;
                self.v[i].data[e] = v;
                let mh = m / bc1;
                let vh = v / bc2;
                p.data[e] = f32r(p.data[e] - lr * mh / (vh.sqrt() + self.cfg.eps));
            }
        }
        Ok(())
    }
}
