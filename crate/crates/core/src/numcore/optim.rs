use serde::{Deserialize, Serialize};

use super::NetParams;
use crate::error::{first_non_finite, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Heavy-ball SGD: `m <- beta1 m + g`, `θ <- θ - lr m`.
    Sgd,
    /// Bias-corrected adaptive moments.
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_stab: f64,
}

impl OptimizerState {
    pub fn adam(n_params: usize, lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, n_params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn sgd(n_params: usize, lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, n_params, lr, 0.0, 0.0, 0.0)
    }

    pub fn new(kind: OptimizerKind, n_params: usize, lr: f64, beta1: f64, beta2: f64, eps_stab: f64) -> Self {
        Self {
            kind,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
            lr,
            beta1,
            beta2,
            eps_stab,
        }
    }
}

/// One update. Consumes and returns both parameters and state.
pub fn optimizer_step(
    mut params: NetParams,
    grads: &[f64],
    mut state: OptimizerState,
) -> Result<(NetParams, OptimizerState)> {
    if grads.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(Error::shape(format!("{} gradient entries", params.len()), grads.len()));
    }
    if !(0.0..1.0).contains(&state.beta1) || !(0.0..1.0).contains(&state.beta2) {
        return Err(Error::domain("optimizer betas must lie in [0, 1)"));
    }
    if let Some(i) = first_non_finite(grads) {
        return Err(Error::Numeric {
            what: "gradient passed to optimizer".into(),
            index: Some(i),
        });
    }
    state.step_count += 1;
    match state.kind {
        OptimizerKind::Sgd => {
            for ((p, m), &g) in params.values.iter_mut().zip(&mut state.first_moment).zip(grads) {
                *m = state.beta1 * *m + g;
                *p -= state.lr * *m;
            }
        }
        OptimizerKind::Adam => {
            let t = state.step_count as i32;
            let c1 = 1.0 - state.beta1.powi(t);
            let c2 = 1.0 - state.beta2.powi(t);
            for (((p, m), v), &g) in params
                .values
                .iter_mut()
                .zip(&mut state.first_moment)
                .zip(&mut state.second_moment)
                .zip(grads)
            {
                *m = state.beta1 * *m + (1.0 - state.beta1) * g;
                *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps_stab);
            }
        }
    }
    Ok((params, state))
}
