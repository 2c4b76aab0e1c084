//! AdamW with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::model::{ModelDims, ParamTensors};

use super::TrainError;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamWState {
    m: ParamTensors,
    v: ParamTensors,
    pub t: u64,
}

impl AdamWState {
    pub fn new(dims: &ModelDims) -> Self {
        Self {
            m: ParamTensors::zeros(dims),
            v: ParamTensors::zeros(dims),
            t: 0,
        }
    }
}

/// One update step:
///
/// ```text
/// m = b1 m + (1 - b1) g        v = b2 v + (1 - b2) g^2
/// m_hat = m / (1 - b1^t)       v_hat = v / (1 - b2^t)
/// p = p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)
/// ```
pub fn adamw_step(
    params: &mut ParamTensors,
    grads: &ParamTensors,
    state: &mut AdamWState,
    learning_rate: f64,
    cfg: &OptimizerConfig,
) -> Result<(), TrainError> {
    for ((p, g), (m, v)) in params
        .fields()
        .iter()
        .zip(grads.fields().iter())
        .zip(state.m.fields().iter().zip(state.v.fields().iter()))
    {
        if p.data.len() != g.data.len() || p.data.len() != m.data.len() || p.data.len() != v.data.len()
        {
            return Err(TrainError::ShapeError(format!(
                "optimizer state shape mismatch: param {} vs grad {} vs moments {}/{}",
                p.data.len(),
                g.data.len(),
                m.data.len(),
                v.data.len()
            )));
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);

    let params_f = params.fields_mut();
    let grads_f = grads.fields();
    let m_f = state.m.fields_mut();
    let v_f = state.v.fields_mut();
    for (((p, g), m), v) in params_f.into_iter().zip(grads_f).zip(m_f).zip(v_f) {
        for i in 0..p.data.len() {
            let grad = g.data[i];
            m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * grad;
            v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * grad * grad;
            let m_hat = m.data[i] / bias1;
            let v_hat = v.data[i] / bias2;
            p.data[i] = p.data[i] * (1.0 - learning_rate * cfg.weight_decay)
                - learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
