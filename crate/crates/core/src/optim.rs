//! Adam with optional global-norm gradient clipping.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale the gradient so its global L2 norm is at most this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-7, clip_norm: Some(5.0) }
    }
}

/// First and second moment estimates, one pair per trainable tensor in store
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Array2<f64>>,
    pub second: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn zeros(store: &ParamStore) -> Self {
        let shapes: Vec<_> = store
            .entries()
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| Array2::zeros(e.value.dim()))
            .collect();
        Self { step: 0, first: shapes.clone(), second: shapes }
    }

    /// Checks the moments line up with the store's trainable tensors.
    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        let trainable: Vec<_> = store.entries().iter().filter(|e| e.kind == ParamKind::Trainable).collect();
        if self.first.len() != trainable.len() || self.second.len() != trainable.len() {
            return Err(Error::Incompatible(format!(
                "optimizer state holds {} tensors, model has {} trainable",
                self.first.len(),
                trainable.len()
            )));
        }
        for ((e, m), v) in trainable.iter().zip(&self.first).zip(&self.second) {
            if m.dim() != e.value.dim() || v.dim() != e.value.dim() {
                return Err(Error::Incompatible(format!("optimizer moment shape mismatch for {}", e.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Self { config, state: AdamState::zeros(store) }
    }

    /// Applies one update. `grads` holds one tensor per store entry (buffers
    /// are ignored). Returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Array2<f64>]) -> Result<f64> {
        if grads.len() != store.len() {
            return Err(Error::Shape(format!("{} gradients for {} tensors", grads.len(), store.len())));
        }
        let trainable: Vec<usize> =
            store.entries().iter().enumerate().filter(|(_, e)| e.kind == ParamKind::Trainable).map(|(i, _)| i).collect();
        let norm = trainable.iter().flat_map(|&i| grads[i].iter()).map(|g| g * g).sum::<f64>().sqrt();
        let scale = match self.config.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.state.step += 1;
        let t = self.state.step as i32;
        let AdamConfig { learning_rate, beta1, beta2, epsilon, .. } = self.config;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (slot, &i) in trainable.iter().enumerate() {
            let m = &mut self.state.first[slot];
            let v = &mut self.state.second[slot];
            let p = store.get_mut(ids[i]);
            Zip::from(p).and(m).and(v).and(&grads[i]).for_each(|p, m, v, &g| {
                let g = g * scale;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + epsilon);
            });
        }
        Ok(norm)
    }
}
