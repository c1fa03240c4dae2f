use ndarray::{Array1, ArrayView1, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest value a smoothing factor may take after an update.
pub const LAMBDA_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
    pub floor: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            betas: (0.9, 0.999),
            epsilon: 1e-8,
            floor: LAMBDA_FLOOR,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub first_moment: Array1<f64>,
    pub second_moment: Array1<f64>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(dim: usize, config: AdamWConfig) -> Self {
        OptimizerState {
            config,
            first_moment: Array1::zeros(dim),
            second_moment: Array1::zeros(dim),
            step_count: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update, then clamps every entry to the floor.
pub fn adamw_step(
    state: &mut OptimizerState,
    lambda: &mut Array1<f64>,
    grad: ArrayView1<'_, f64>,
) -> Result<()> {
    let n = state.first_moment.len();
    if lambda.len() != n || grad.len() != n {
        return Err(Error::input(format!(
            "optimizer holds {n} moments, got lambda {} and grad {}",
            lambda.len(),
            grad.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::input("non-finite gradient"));
    }
    let AdamWConfig {
        lr,
        weight_decay,
        betas: (b1, b2),
        epsilon,
        floor,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    Zip::from(lambda)
        .and(&mut state.first_moment)
        .and(&mut state.second_moment)
        .and(grad)
        .for_each(|l, m, v, &g| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *l -= lr * weight_decay * *l;
            *l -= lr * m_hat / (v_hat.sqrt() + epsilon);
            *l = l.max(floor);
        });
    Ok(())
}
