//! Adam optimizer over a parameter store, with bias correction and a
//! serializable state snapshot for exact resume.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::trainer::{Result, TrainError};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: Scalar,
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub eps: Scalar,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair of buffers per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<Scalar>>,
    v: Vec<Vec<Scalar>>,
    t: u64,
}

/// Serializable form of [`AdamState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamSnapshot {
    pub m: Vec<Vec<Scalar>>,
    pub v: Vec<Vec<Scalar>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store
            .ids()
            .map(|id| vec![0.0; store.get(id).values().len()])
            .collect::<Vec<_>>();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over every parameter that received a gradient. Parameters
    /// without gradients keep their moments untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Vec<Scalar>>],
        cfg: &AdamConfig,
    ) -> Result<()> {
        if grads.len() != self.m.len() || store.len() != self.m.len() {
            return Err(TrainError::Validation(format!(
                "optimizer holds {} parameters, got {} gradients over {} parameters",
                self.m.len(),
                grads.len(),
                store.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (idx, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[idx] else { continue };
            let theta = store.get_mut(id).values_mut();
            if g.len() != theta.len() {
                return Err(TrainError::Validation(format!(
                    "gradient of {} values against a parameter of {}",
                    g.len(),
                    theta.len()
                )));
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..theta.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> AdamSnapshot {
        AdamSnapshot {
            m: self.m.clone(),
            v: self.v.clone(),
            t: self.t,
        }
    }

    pub fn from_snapshot(snap: &AdamSnapshot, store: &ParamStore) -> Result<Self> {
        if snap.m.len() != store.len() || snap.v.len() != store.len() {
            return Err(TrainError::Validation(format!(
                "optimizer snapshot covers {} parameters, store holds {}",
                snap.m.len(),
                store.len()
            )));
        }
        for (idx, id) in store.ids().enumerate() {
            let want = store.get(id).values().len();
            if snap.m[idx].len() != want || snap.v[idx].len() != want {
                return Err(TrainError::Validation(format!(
                    "optimizer snapshot shape mismatch on parameter {}",
                    store.name(id)
                )));
            }
        }
        Ok(Self {
            m: snap.m.clone(),
            v: snap.v.clone(),
            t: snap.t,
        })
    }
}
