//! Bias-corrected Adam.

use crate::params::ParamSet;
use crate::tensor::{el, Element};

use super::TrainError;

pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers, parallel to the parameter set.
pub struct AdamState<T> {
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let m = params
            .iter()
            .map(|(_, p)| vec![T::zero(); p.value.numel()])
            .collect();
        let v = params
            .iter()
            .map(|(_, p)| vec![T::zero(); p.value.numel()])
            .collect();
        AdamState { step: 0, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One Adam update over every parameter. No weight decay, no clipping.
pub fn adam_step<T: Element>(
    params: &mut ParamSet<T>,
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
    betas: (f64, f64),
) -> Result<(), TrainError> {
    if grads.len() != params.len() {
        return Err(TrainError::BadConfig(format!(
            "{} grads for {} params",
            grads.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step;
    let (b1, b2) = betas;
    let corr1 = 1.0 - b1.powi(t as i32);
    let corr2 = 1.0 - b2.powi(t as i32);
    // Per-step scalars in f64, applied in the element type.
    let b1t = el::<T>(b1);
    let b2t = el::<T>(b2);
    let one_m_b1 = el::<T>(1.0 - b1);
    let one_m_b2 = el::<T>(1.0 - b2);
    let inv_corr1 = el::<T>(1.0 / corr1);
    let inv_corr2 = el::<T>(1.0 / corr2);
    let lr_t = el::<T>(lr);
    let eps = el::<T>(ADAM_EPS);

    for (i, (_, p)) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if g.len() != p.value.numel() {
            return Err(TrainError::BadConfig(format!(
                "grad {i} has {} elements, param {} has {}",
                g.len(),
                p.name,
                p.value.numel()
            )));
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let data = p.value.data_mut();
        for j in 0..data.len() {
            m[j] = b1t * m[j] + one_m_b1 * g[j];
            v[j] = b2t * v[j] + one_m_b2 * g[j] * g[j];
            let m_hat = m[j] * inv_corr1;
            let v_hat = v[j] * inv_corr2;
            data[j] = data[j] - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
