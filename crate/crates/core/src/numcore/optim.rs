use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.lr >= 0.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// First and second moment buffers, one per trainable parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter.
pub fn adam_step(cfg: &AdamConfig, state: &mut AdamState, store: &mut ParamStore) -> Result<()> {
    let t = state.t + 1;
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    let mut slot = 0;
    for p in store.iter_mut().filter(|p| p.trainable) {
        let grad = p
            .grad
            .as_ref()
            .ok_or_else(|| Error::usage(format!("parameter {} has no gradient", p.name)))?;
        let (m, v) = (&mut state.m[slot], &mut state.v[slot]);
        if m.shape() != p.value.shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                left: m.shape().to_vec(),
                right: p.value.shape().to_vec(),
            });
        }
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, (theta, g)) in p.value.data_mut().iter_mut().zip(grad.data()).enumerate() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * g;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = md[i] / c1;
            let v_hat = vd[i] / c2;
            *theta -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        slot += 1;
    }
    state.t = t;
    Ok(())
}
