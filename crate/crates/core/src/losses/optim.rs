//! Adaptive moment estimation with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to parameters with two or more dimensions.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| {
            let mut s = ParamStore::new();
            for (k, t) in p.iter() {
                s.insert(k.clone(), Tensor::zeros(t.shape().to_vec()));
            }
            s
        };
        Self {
            cfg,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step.min(i32::MAX as u64) as i32);
        let names: Vec<String> = grads.names().cloned().collect();
        for name in names {
            let g = grads.get(&name)?;
            let p = params
                .get_mut(&name)
                .ok_or_else(|| Error::Missing(format!("parameter {name:?} for gradient")))?;
            let (m, v) = match (self.m.get_mut(&name), self.v.get_mut(&name)) {
                (Some(m), Some(v)) => (m, v),
                _ => return Err(Error::Missing(format!("optimizer state for {name:?}"))),
            };
            if g.shape() != p.shape() || m.shape() != p.shape() {
                return Err(Error::shape(
                    "AdamW",
                    format!("{name}: param {:?}, grad {:?}", p.shape(), g.shape()),
                ));
            }
            let decay = if p.ndim() >= 2 { c.weight_decay } else { 0.0 };
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gi;
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gi * gi;
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                pd[i] -= lr * (mh / (vh.sqrt() + c.eps) + decay * pd[i]);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm(grads: &ParamStore) -> f64 {
    grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        let names: Vec<String> = grads.names().cloned().collect();
        for n in names {
            for v in grads.get_mut(&n).unwrap().data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
