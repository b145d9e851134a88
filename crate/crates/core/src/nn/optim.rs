use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

/// Adam with bias correction: `theta -= lr * m_hat / (sqrt(v_hat) + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self::with_hyper(n_params, AdamHyper::new(lr))
    }

    pub fn with_hyper(n_params: usize, hyper: AdamHyper) -> Self {
        Self {
            hyper,
            step: 0,
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
        }
    }

    pub fn update(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                context: "adam state vs parameters/gradients",
                left: vec![params.len(), grads.len()],
                right: vec![self.m.len()],
            });
        }
        self.step += 1;
        let h = self.hyper;
        let t = self.step as i32;
        let (b1, b2) = (T::of(h.beta1), T::of(h.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let corr1 = T::of(1.0 - h.beta1.powi(t));
        let corr2 = T::of(1.0 - h.beta2.powi(t));
        let (lr, eps) = (T::of(h.lr), T::of(h.eps));
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            let m_hat = *m / corr1;
            let v_hat = *v / corr2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
