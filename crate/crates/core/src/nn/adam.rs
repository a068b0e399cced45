//! Adam optimizer with bias correction.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{CoreError, Result};
use crate::nn::{Parameter, Real};

/// Per-parameter first/second-moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<F: Real> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl<F: Real> AdamState<F> {
    /// Fresh state for the given parameter list, beta1 = 0.9, beta2 = 0.999,
    /// epsilon = 1e-8.
    pub fn new(params: &[Parameter<F>]) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &[Parameter<F>], beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            m: params.iter().map(|p| alloc::vec![F::zero(); p.len()]).collect(),
            v: params.iter().map(|p| alloc::vec![F::zero(); p.len()]).collect(),
            t: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update. `grads` must align with `params`
    /// element-for-element; non-finite gradients are rejected before any
    /// state is touched.
    pub fn step(&mut self, params: &mut [Parameter<F>], grads: &[Vec<F>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(CoreError::DimensionMismatch(format!(
                "{} gradient buffers for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if g.len() != p.len() {
                return Err(CoreError::DimensionMismatch(format!(
                    "gradient length {} for parameter {} of length {}",
                    g.len(),
                    p.name,
                    p.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::NumericalError(format!(
                    "non-finite gradient for parameter {}",
                    p.name
                )));
            }
        }

        self.t += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let corr1 = F::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = F::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr_f = F::from_f64(lr);
        let eps = F::from_f64(self.epsilon);

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((pv, &gv), (mv, vv)) in p
                .values
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let m_hat = *mv / corr1;
                let v_hat = *vv / corr2;
                *pv = *pv - lr_f * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
