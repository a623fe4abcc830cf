//! Adam and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{GlksError, Result};
use crate::param::ParamStore;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// Bias-corrected Adam with per-parameter step counts, so parameters frozen
/// for a while start their correction from their own first update.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new<T: Scalar>(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let sizes: Vec<usize> = store.iter().map(|(_, p)| p.value.numel()).collect();
        Adam {
            config,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: vec![0; sizes.len()],
        }
    }

    pub fn step_count(&self, index: usize) -> u64 {
        self.steps[index]
    }

    /// Updates every parameter accepted by `select` from its accumulated
    /// gradient. A non-finite gradient aborts before anything is modified.
    pub fn step<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        select: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for (_, p) in store.iter() {
            if select(&p.name) && p.grad.data().iter().any(|g| !g.is_finite()) {
                return Err(GlksError::NonFinite(p.name.clone()));
            }
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        for (id, p) in store.iter_mut() {
            let i = id.index();
            if !select(&p.name) {
                continue;
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                let g = g.as_f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                *w = T::of(w.as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Scales the gradients of parameters accepted by `select` so their joint L2
/// norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(
    store: &mut ParamStore<T>,
    max_norm: f64,
    select: impl Fn(&str) -> bool,
) -> f64 {
    let norm = store
        .iter()
        .filter(|(_, p)| select(&p.name))
        .map(|(_, p)| {
            p.grad
                .data()
                .iter()
                .map(|g| g.as_f64().powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for (_, p) in store.iter_mut().filter(|(_, p)| select(&p.name)) {
            for g in p.grad.data_mut() {
                *g *= s;
            }
        }
    }
    norm
}
