use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::{AutodiffError, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for every parameter of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Matrix> = store
            .iter()
            .map(|p| Matrix::zeros(p.value.raw_dim()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update using the gradients held in `store`.
    /// Any non-finite gradient aborts before touching parameters.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<(), AutodiffError> {
        if self.m.len() != store.len() {
            return Err(AutodiffError::Config(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (i, p) in store.iter().enumerate() {
            if self.m[i].dim() != p.value.dim() {
                return Err(AutodiffError::Config(format!(
                    "moment shape mismatch for {}",
                    p.name
                )));
            }
            if let Some(pos) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(AutodiffError::NonFinite {
                    what: format!("gradient of {}", p.name),
                    index: pos,
                });
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *w -= lr * mh / (vh.sqrt() + eps);
                });
        }
        Ok(())
    }
}
