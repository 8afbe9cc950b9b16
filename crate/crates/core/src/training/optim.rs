//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 8e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 4e-5,
        }
    }
}

/// Moment estimates, one slot per parameter of the store (zero for frozen ones).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || -> Vec<Tensor> { store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect() };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Updates every parameter in `ids` from `grads`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, ids: &[ParamId]) -> Result<()> {
        let c = self.config;
        if self.m.len() != store.len() {
            return Err(Error::invalid(
                "AdamW::update",
                format!("optimizer holds {} slots, store has {}", self.m.len(), store.len()),
            ));
        }
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for &id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let p = store.get_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::shape("AdamW::update", format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape())));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *pv);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so that their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let n = grads.global_norm();
    if max_norm > 0.0 && n > max_norm {
        grads.scale(max_norm / n);
    }
    n
}
