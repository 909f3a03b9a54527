//! Adam with bias correction.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::{Grads, ParamRegistry};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
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

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: IndexMap<String, Vec<f64>>,
    second: IndexMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.second.get(name).map(Vec::as_slice)
    }
}

/// One Adam update of every trainable parameter that has a gradient.
/// Frozen parameters are left untouched even if a gradient is supplied.
pub fn adam_step(params: &mut ParamRegistry, grads: &Grads, state: &mut AdamState) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| Error::Parameter {
            name: name.clone(),
            reason: "gradient for unknown parameter".into(),
        })?;
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }

    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);

    for (name, g) in grads {
        if !params.is_trainable(name) {
            continue;
        }
        let p = params.get_mut(name).expect("checked above");
        let n = p.numel();
        let m = state.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
