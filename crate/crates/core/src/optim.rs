//! ADAM and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::tensor::{s, Scalar, Tensor};

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// Bias-corrected ADAM step, in place.
    pub fn update<T: Scalar>(
        &self,
        param: &mut Tensor<T>,
        grad: &Tensor<T>,
        state: &mut AdamState<T>,
        lr: f64,
    ) {
        debug_assert_eq!(param.shape(), grad.shape());
        state.step += 1;
        let t = state.step as i32;
        let (b1, b2): (T, T) = (s(self.beta1), s(self.beta2));
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let step: T = s(lr / c1);
        let inv_c2: T = s(1.0 / c2);
        let eps: T = s(self.eps);
        let one = T::one();
        let p = param.data_mut();
        let m = state.m.data_mut();
        let v = state.v.data_mut();
        for (((p, &g), m), v) in p.iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p -= step * *m / ((*v * inv_c2).sqrt() + eps);
        }
    }
}

/// Step decay: `lr · factor^(milestones passed)`, milestones given as
/// fractions of the total epoch count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub lr: f64,
    pub factor: f64,
    pub milestones: Vec<f64>,
}

impl Default for StepDecay {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            factor: 0.25,
            milestones: vec![0.50, 0.75, 0.89, 0.94],
        }
    }
}

impl StepDecay {
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&f| epoch as f64 >= f * epochs as f64)
            .count();
        self.lr * self.factor.powi(passed as i32)
    }
}

/// Cosine annealing from `lr` to `min_lr` over `t_max` epochs.
pub fn cosine_lr(lr: f64, min_lr: f64, epoch: usize, t_max: usize) -> f64 {
    let t = epoch.min(t_max) as f64 / t_max.max(1) as f64;
    min_lr + 0.5 * (lr - min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_from_fresh_state_leaves_param() {
        let mut p = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let orig = p.clone();
        let g = Tensor::<f64>::zeros(&[3]);
        let mut st = AdamState::new(&[3]);
        Adam::default().update(&mut p, &g, &mut st, 1e-3);
        assert_eq!(p, orig);
    }

    #[test]
    fn constant_grad_steps_approach_lr_sign() {
        // scalar recurrence oracle: m_t/(1-b1^t) -> g, v_t/(1-b2^t) -> g^2
        let lr = 1e-3;
        for g in [0.7, -3.0] {
            let mut p = Tensor::<f64>::zeros(&[1]);
            let gt = Tensor::<f64>::full(&[1], g);
            let mut st = AdamState::new(&[1]);
            let mut last = 0.0;
            for _ in 0..2000 {
                let before = p.data()[0];
                Adam::default().update(&mut p, &gt, &mut st, lr);
                last = p.data()[0] - before;
            }
            let expected = -lr * f64::signum(g);
            assert!(
                (last - expected).abs() < 1e-6 * lr.max(1.0),
                "{last} vs {expected}"
            );
        }
    }

    #[test]
    fn identical_grads_update_identically() {
        let mut a = Tensor::<f32>::full(&[4], 0.3);
        let mut b = a.clone();
        let g = Tensor::<f32>::from_f64(&[4], &[0.1, -0.2, 0.3, 0.0]).unwrap();
        let (mut sa, mut sb) = (AdamState::new(&[4]), AdamState::new(&[4]));
        for _ in 0..5 {
            Adam::default().update(&mut a, &g, &mut sa, 5e-4);
            Adam::default().update(&mut b, &g, &mut sb, 5e-4);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn step_decay_schedule() {
        let sched = StepDecay::default();
        assert_eq!(sched.lr_at(0, 400), 5e-4);
        assert!((sched.lr_at(200, 400) - 1.25e-4).abs() < 1e-18);
        assert!((sched.lr_at(399, 400) - 5e-4 * 0.25f64.powi(4)).abs() < 1e-18);
        assert_eq!(sched.lr_at(199, 400), 5e-4);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1.0, 0.0, 0, 64), 1.0);
        assert!((cosine_lr(1.0, 0.0, 32, 64) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 0.0, 64, 64).abs() < 1e-12);
    }
}
