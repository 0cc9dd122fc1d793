//! Adam with per-buffer moment state.

use num_traits::Float;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments for one flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Float> AdamState<T> {
    pub fn zeros(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = T::zero());
        self.v.iter_mut().for_each(|x| *x = T::zero());
        self.step = 0;
    }

    /// One bias-corrected Adam step on `params` given `grads`.
    pub fn update(&mut self, params: &mut [T], grads: &[T], lr: f64, cfg: &AdamConfig) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from(cfg.beta1).unwrap();
        let b2 = T::from(cfg.beta2).unwrap();
        let one = T::one();
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        let step_size = T::from(lr).unwrap() / bc1;
        let bc2_sqrt = bc2.sqrt();
        let eps = T::from(cfg.eps).unwrap();
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let denom = v.sqrt() / bc2_sqrt + eps;
            *p = *p - step_size * *m / denom;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_params() {
        let mut p = vec![1.0f64, -2.0, 3.5];
        let before = p.clone();
        let mut st = AdamState::zeros(3);
        st.update(&mut p, &[0.0; 3], 0.1, &AdamConfig::default());
        assert_eq!(p, before);
    }

    #[test]
    fn quadratic_converges() {
        // f(x) = (x - 3)^2
        let mut x = vec![0.0f64];
        let mut st = AdamState::zeros(1);
        let cfg = AdamConfig::default();
        let mut reached = None;
        for step in 0..2000 {
            let g = 2.0 * (x[0] - 3.0);
            st.update(&mut x, &[g], 0.05, &cfg);
            if (x[0] - 3.0).powi(2) < 1e-8 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "x = {}", x[0]);
    }
}
