use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};

pub const LEARNING_RATE: f64 = 1e-3;
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Bias-corrected Adam with one moment buffer pair per parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    #[serde(skip)]
    m: Vec<Vec<f64>>,
    #[serde(skip)]
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self::with_rates(store, LEARNING_RATE, BETA1, BETA2, EPSILON)
    }

    pub fn with_rates(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.values().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Steps taken so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Rebuilds an optimizer from saved buffers.
    pub fn from_parts(
        template: Adam,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    ) -> Self {
        Adam { m, v, ..template }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        if grads.0.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} gradients and {} moment buffers for {} parameters",
                grads.0.len(),
                self.m.len(),
                store.len()
            )));
        }
        for (i, (g, p)) in grads.0.iter().zip(store.values()).enumerate() {
            if g.len() != p.len() || self.m[i].len() != p.len() {
                return Err(Error::Contract(format!(
                    "gradient for parameter {} has {} values, expected {}",
                    i,
                    g.len(),
                    p.len()
                )));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in store.values_mut().iter_mut().enumerate() {
            let g = &grads.0[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
