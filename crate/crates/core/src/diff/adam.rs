use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

/// Adam with bias correction. Moment buffers mirror the shapes of the store it was built for.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    owned: Vec<bool>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Self::for_prefix(config, store, "")
    }

    /// Optimizes only the parameters whose names start with `prefix`.
    pub fn for_prefix(config: AdamConfig, store: &ParamStore, prefix: &str) -> Self {
        let owned: Vec<bool> = store
            .ids()
            .map(|id| store.name(id).starts_with(prefix))
            .collect();
        let zeros = || {
            store
                .ids()
                .zip(&owned)
                .map(|(id, &o)| vec![0.0; if o { store.get(id).numel() } else { 0 }])
                .collect()
        };
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
            owned,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    ///
    /// Parameters without an accumulator are treated as having zero
    /// gradient; a store with no gradients at all is a contract error.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::contract("optimizer was built for a different store"));
        }
        let mine = |id: super::ParamId| self.owned[id.0];
        if store
            .ids()
            .filter(|&id| mine(id))
            .all(|id| store.get(id).grad().is_none())
        {
            return Err(Error::contract(
                "adam step without any accumulated gradient",
            ));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (slot, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            if !self.owned[slot] {
                continue;
            }
            let t = store.get_mut(id);
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
            t.zero_grad();
        }
        Ok(())
    }
}
