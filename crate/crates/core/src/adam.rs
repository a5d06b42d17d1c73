//! Adam with bias correction.

use crate::param::{Bound, ParamStore};
use crate::real::Real;
use crate::tape::Tape;
use std::fmt;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

/// A non-finite gradient names the parameter that produced it so the
/// abort message is actionable.
#[derive(Clone, Debug, PartialEq)]
pub struct NanGradient {
    pub param: String,
}

impl fmt::Display for NanGradient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "non-finite gradient in parameter {}", self.param)
    }
}

impl std::error::Error for NanGradient {}

/// First/second moment accumulators, shaped like their parameters.
pub struct AdamState<F: Real> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    step: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let m = store.ids().map(|id| vec![F::ZERO; store.tensor(id).numel()]).collect();
        let v = store.ids().map(|id| vec![F::ZERO; store.tensor(id).numel()]).collect();
        AdamState { m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update over every parameter, reading gradients
    /// from a tape that has run backward.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        tape: &Tape<F>,
        bound: &Bound,
        cfg: &AdamConfig,
    ) -> Result<(), NanGradient> {
        self.step += 1;
        let b1 = F::from_f64(cfg.beta1);
        let b2 = F::from_f64(cfg.beta2);
        let one_minus_b1 = F::from_f64(1.0 - cfg.beta1);
        let one_minus_b2 = F::from_f64(1.0 - cfg.beta2);
        let corr1 = F::from_f64(1.0 / (1.0 - cfg.beta1.powi(self.step as i32)));
        let corr2 = F::from_f64(1.0 / (1.0 - cfg.beta2.powi(self.step as i32)));
        let lr = F::from_f64(cfg.lr);
        let eps = F::from_f64(cfg.eps);

        let ids: Vec<_> = store.ids().collect();
        for (pi, id) in ids.into_iter().enumerate() {
            let grad = store
                .grad_of(tape, bound, id)
                .expect("backward must run before an optimizer step");
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(NanGradient {
                    param: store.name(id).to_string(),
                });
            }
            let grad = grad.to_vec();
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            let data = &mut store.tensor_mut(id).data;
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + one_minus_b1 * g;
                v[j] = b2 * v[j] + one_minus_b2 * g * g;
                let m_hat = m[j] * corr1;
                let v_hat = v[j] * corr2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
