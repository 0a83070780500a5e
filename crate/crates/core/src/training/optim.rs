use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::Parameter;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One decoupled-weight-decay Adam update at step `t >= 1`.
///
/// Parameters that are frozen or carry no gradient are left untouched.
pub fn adamw_step<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    state: &mut AdamState,
    hp: &AdamHyper,
    t: u64,
    lr: f64,
) -> Result<()> {
    if t == 0 {
        return Err(contract("adamw step counter starts at 1"));
    }
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    for p in params {
        if !p.requires_grad {
            continue;
        }
        let Some(grad) = &p.grad else { continue };
        let n = p.value.numel();
        if grad.numel() != n {
            return Err(contract(format!(
                "gradient for {} has {} entries, parameter has {n}",
                p.name,
                grad.numel()
            )));
        }
        let (m, v) = state
            .moments
            .entry(p.name.clone())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        if m.len() != n {
            return Err(contract(format!(
                "optimizer state for {} has {} entries, parameter has {n}",
                p.name,
                m.len()
            )));
        }
        let decay = 1.0 - lr * hp.weight_decay;
        let g = grad.data();
        let w = p.value.data_mut();
        for i in 0..n {
            w[i] *= decay;
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            w[i] -= lr * mhat / (vhat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// `base_lr * (1 - step / total_steps)`, no warmup. Steps past the end clamp
/// to zero.
pub fn linear_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if step > total_steps {
        log::warn!("schedule step {step} beyond total {total_steps}; clamping lr to 0");
        return 0.0;
    }
    if total_steps == 0 {
        return base_lr;
    }
    base_lr * (1.0 - step as f64 / total_steps as f64)
}
