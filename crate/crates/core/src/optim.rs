//! AdamW with decoupled weight decay.
//!
//! Moment state is keyed by parameter name so the optimizer survives
//! parameter-set changes (e.g. adapter-only phases) and checkpointing; each
//! name keeps its own step counter for bias correction.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
struct Moments {
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> AdamW {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, state: HashMap::new() }
    }

    /// Apply one update to `param` given its loss gradient. Decay is
    /// decoupled: `p -= lr · (m̂ / (√v̂ + ε) + wd · p)`.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &[f64]) -> Result<()> {
        let n = param.numel();
        if grad.len() != n {
            return Err(Error::shape(
                "adamw",
                format!("gradient has {} entries for {n}-element tensor {name}", grad.len()),
            ));
        }
        if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::NonFinite { component: format!("gradient of {name} ({bad})") });
        }
        let entry = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| Moments { t: 0, m: vec![0.0; n], v: vec![0.0; n] });
        if entry.m.len() != n {
            return Err(Error::contract(format!(
                "optimizer state for {name} has {} entries, tensor has {n}",
                entry.m.len()
            )));
        }
        entry.t += 1;
        let t = entry.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let data = param.data_mut();
        for i in 0..n {
            let g = grad[i];
            entry.m[i] = self.beta1 * entry.m[i] + (1.0 - self.beta1) * g;
            entry.v[i] = self.beta2 * entry.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = entry.m[i] / bc1;
            let v_hat = entry.v[i] / bc2;
            data[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * data[i]);
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.state.clear();
    }
}

// ── tests ────────────────────────────────────────────────────────────────────
