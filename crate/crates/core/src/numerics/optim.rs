//! Adaptive-moment (Adam) optimizer over flattened parameter bundles.
//!
//! With gradient `g` at step `k` (1-based):
//!
//! ```text
//! m_k = b1 m_{k-1} + (1 - b1) g
//! v_k = b2 v_{k-1} + (1 - b2) g^2
//! theta -= lr * (m_k / (1 - b1^k)) / (sqrt(v_k / (1 - b2^k)) + eps)
//! ```
//!
//! so the first step moves each coordinate by `lr * g / (|g| + eps)`.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, CdlfError, Result};
use crate::numerics::params::ParamGroup;
use crate::scalar::Scalar;

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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
        }
    }

    /// Applies one update to `params` from `grads` (same architecture).
    pub fn step<P: ParamGroup<T>>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let g = grads.flatten();
        let mut theta = params.flatten();
        self.step_flat(&mut theta, &g)?;
        params.unflatten(&theta);
        Ok(())
    }

    pub fn step_flat(&mut self, theta: &mut [T], g: &[T]) -> Result<()> {
        if g.len() != self.m.len() || theta.len() != self.m.len() {
            return Err(dim_err("optimizer_step", self.m.len(), g.len()));
        }
        if !g.iter().all(|x| x.is_finite()) {
            return Err(CdlfError::NonFinite("optimizer gradients"));
        }
        self.step += 1;
        let c = self.config;
        let b1 = T::c(c.beta1);
        let b2 = T::c(c.beta2);
        let one = T::one();
        let bc1 = one - T::c(c.beta1.powi(self.step.min(i32::MAX as u64) as i32));
        let bc2 = one - T::c(c.beta2.powi(self.step.min(i32::MAX as u64) as i32));
        let lr = T::c(c.lr);
        let eps = T::c(c.eps);
        for i in 0..theta.len() {
            self.m[i] = b1 * self.m[i] + (one - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (one - b2) * g[i] * g[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            theta[i] -= lr * mh / (vh.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut st = OptimizerState::<f64>::new(3, AdamConfig::default());
        let mut th = vec![1.0, -2.0, 3.0];
        st.step_flat(&mut th, &[0.0; 3]).unwrap();
        assert_eq!(th, vec![1.0, -2.0, 3.0]);

        st.m = vec![1.0; 3];
        st.v = vec![1.0; 3];
        let mut th2 = th.clone();
        st.step_flat(&mut th2, &[0.0; 3]).unwrap();
        assert!((st.m[0] - 0.9).abs() < 1e-15);
        assert!((st.v[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn first_step_is_sign_scaled() {
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        let mut st = OptimizerState::<f64>::new(2, cfg);
        let mut th = vec![0.0, 0.0];
        st.step_flat(&mut th, &[0.5, -4.0]).unwrap();
        assert!((th[0] + 0.01 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
        assert!((th[1] - 0.01 * 4.0 / (4.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn state_advances_between_identical_calls() {
        let mut st = OptimizerState::<f64>::new(1, AdamConfig::default());
        let mut th = vec![0.0];
        st.step_flat(&mut th, &[1.0]).unwrap();
        let after_one = th[0];
        let m1 = st.m[0];
        st.step_flat(&mut th, &[1.0]).unwrap();
        assert_eq!(st.step, 2);
        assert_ne!(st.m[0], m1);
        assert!(th[0] < after_one);
    }

    #[test]
    fn rejects_non_finite_and_mismatched() {
        let mut st = OptimizerState::<f64>::new(2, AdamConfig::default());
        let mut th = vec![0.0, 0.0];
        assert!(st.step_flat(&mut th, &[f64::NAN, 0.0]).is_err());
        assert!(st.step_flat(&mut th, &[0.0]).is_err());
        assert_eq!(st.step, 0);
    }
}
