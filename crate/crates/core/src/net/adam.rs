//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use super::model::{Params, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Params<T>,
    pub v: Params<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &Params<T>, config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One optimizer step in place. Non-finite gradients abort without
/// touching `params` or the state.
pub fn adam_step<T: Real>(params: &mut Params<T>, grads: &Params<T>, state: &mut AdamState<T>) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(Error::DimensionMismatch("gradient layout differs from parameters".into()));
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient contains NaN or infinity".into()));
    }
    state.t += 1;
    let c = state.config;
    let t = state.t as i32;
    let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.eps));
    let (inv_bc1, inv_bc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
    for ((p, g), (m, v)) in params
        .arrays
        .iter_mut()
        .zip(&grads.arrays)
        .zip(state.m.arrays.iter_mut().zip(state.v.arrays.iter_mut()))
    {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + (T::one() - b1) * gi;
            v.data[i] = b2 * v.data[i] + (T::one() - b2) * gi * gi;
            let m_hat = m.data[i] * inv_bc1;
            let v_hat = v.data[i] * inv_bc2;
            p.data[i] = p.data[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::model::ParamArray;

    fn scalar(v: f64) -> Params<f64> {
        Params {
            arrays: vec![ParamArray {
                name: "w".into(),
                shape: vec![1],
                data: vec![v],
            }],
        }
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = scalar(0.0);
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &scalar(1.0), &mut s).unwrap();
        assert!((p.arrays[0].data[0] + 1e-4 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar(0.25);
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &scalar(0.0), &mut s).unwrap();
        assert_eq!(p.arrays[0].data[0], 0.25);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        let mut p = scalar(0.0);
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &scalar(1.0), &mut s).unwrap();
        let after_one = p.arrays[0].data[0];
        adam_step(&mut p, &scalar(1.0), &mut s).unwrap();
        // m_hat = v_hat = 1 on every step for constant unit gradient
        assert!(p.arrays[0].data[0] < after_one);
        assert!((p.arrays[0].data[0] + 2e-4 / (1.0 + 1e-8)).abs() < 1e-12);
        assert!(s.v.arrays[0].data[0] >= 0.0);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut p = scalar(1.0);
        let mut s = AdamState::new(&p, AdamConfig::default());
        assert!(adam_step(&mut p, &scalar(f64::NAN), &mut s).is_err());
        assert_eq!(p.arrays[0].data[0], 1.0);
        assert_eq!(s.t, 0);
    }
}
