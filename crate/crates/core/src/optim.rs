//! Adam with coupled L2 weight decay.
//!
//! `g' = g + λθ` (weights only; biases and batchnorm γ/β are exempt), then the
//! usual bias-corrected first/second moment update
//! `θ ← θ − lr · m̂ / (sqrt(v̂) + ε)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, Model};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.99,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.001,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid optimizer config {self:?}"
            )))
        }
    }
}

/// First/second moments per parameter tensor plus the step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears both moments and the step counter.
    pub fn reset(&mut self) {
        self.m.clear();
        self.v.clear();
        self.t = 0;
    }
}

pub fn reset_state(state: &mut OptimState) {
    state.reset();
}

/// One Adam update of `values` at step `t` (1-based).
pub fn adam_update(
    values: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    decay: bool,
    t: u64,
    cfg: &OptimConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let wd = if decay { cfg.weight_decay } else { 0.0 };
    for i in 0..values.len() {
        let g = grads[i] + wd * values[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        values[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// One Adam step over every trainable parameter of `model`.
///
/// Fails before touching anything if a gradient is non-finite or its shape
/// does not match the parameter. Moment buffers are allocated on the first step.
pub fn adam_step(
    model: &mut Model,
    grads: &Gradients,
    state: &mut OptimState,
    cfg: &OptimConfig,
) -> Result<()> {
    let slices = grads.slices();
    let specs = model.param_specs();
    if specs.len() != slices.len() {
        return Err(Error::Shape(format!(
            "gradient has {} tensors, model has {}",
            slices.len(),
            specs.len()
        )));
    }
    for (p, g) in specs.iter().zip(&slices) {
        if p.len != g.len() {
            return Err(Error::Shape(format!(
                "gradient for `{}` has {} elements, parameter has {}",
                p.name,
                g.len(),
                p.len
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    if !state.m.is_empty() && state.m.len() != slices.len() {
        return Err(Error::Shape(
            "optimizer state does not match the model".into(),
        ));
    }
    if state.m.is_empty() {
        state.m = slices.iter().map(|g| vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    }
    state.t += 1;
    let t = state.t;
    for (((p, g), m), v) in model
        .params_mut()
        .into_iter()
        .zip(&slices)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        adam_update(p.values, g, m, v, p.decay, t, cfg);
    }
    Ok(())
}
