use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8, 0.01)
    }
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Parameters that have optimizer state.
    pub fn tracked(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.moments.keys().copied()
    }

    /// One update of every trainable parameter from its accumulated gradient.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<f32>, lr: f64) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::invalid("adamw", format!("learning rate {lr}")));
        }
        for (_, p) in store.iter() {
            if let Some(g) = &p.grad {
                if !g.all_finite() {
                    return Err(Error::NonFinite("gradient"));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        let ids: Vec<ParamId> = store.trainable().collect();
        for id in ids {
            let p = store.get_mut(id);
            let Some(grad) = p.grad.as_ref() else { continue };
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![0.0; grad.numel()], vec![0.0; grad.numel()]));
            let grad = grad.data().to_vec();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gi = grad[i] as f64;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let (mh, vh) = (m[i] / bc1, v[i] / bc2);
                *w = (*w as f64 * decay - lr * mh / (vh.sqrt() + self.eps)) as f32;
            }
        }
        Ok(())
    }
}
