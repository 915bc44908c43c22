//! SGD with momentum and a step-decay learning-rate schedule.

use crate::error::{CoreError, Result};
use crate::tensor::{r, Real, Tensor};

/// Per-parameter-group optimizer state. Velocity buffers are allocated lazily
/// on the first step for each parameter slot.
#[derive(Clone, Debug)]
pub struct SgdState<T> {
    pub learning_rate: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> SgdState<T> {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64, slots: usize) -> Self {
        SgdState {
            learning_rate: r(learning_rate),
            momentum: r(momentum),
            weight_decay: r(weight_decay),
            velocity: vec![Vec::new(); slots],
        }
    }

    /// v <- mu*v + g; theta <- theta - lr*(v + wd*theta)
    pub fn step(&mut self, slot: usize, param: &mut Tensor<T>, grad: &[T]) -> Result<()> {
        if grad.len() != param.numel() {
            return Err(CoreError::DimensionMismatch(format!(
                "sgd_step: gradient length {} vs parameter {}",
                grad.len(),
                param.numel()
            )));
        }
        let v = &mut self.velocity[slot];
        if v.is_empty() {
            v.resize(grad.len(), T::zero());
        }
        let (lr, mu, wd) = (self.learning_rate, self.momentum, self.weight_decay);
        let p = param.data_mut();
        for i in 0..grad.len() {
            v[i] = mu * v[i] + grad[i];
            p[i] = p[i] - lr * (v[i] + wd * p[i]);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLrSchedule {
    pub base_lr: f64,
    /// Fractions of total epochs at which the rate decays, strictly increasing
    /// in (0,1).
    pub milestones: Vec<f64>,
    pub decay_factor: f64,
}

impl Default for StepLrSchedule {
    fn default() -> Self {
        // 120/160 of a 200-epoch run, tenfold decay each.
        StepLrSchedule {
            base_lr: 0.01,
            milestones: vec![0.6, 0.8],
            decay_factor: 0.1,
        }
    }
}

impl StepLrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 || self.decay_factor <= 0.0 {
            return Err(CoreError::InvalidConfig(
                "learning rate and decay factor must be positive".into(),
            ));
        }
        let mut prev = 0.0;
        for &m in &self.milestones {
            if m <= prev || m >= 1.0 {
                return Err(CoreError::InvalidConfig(format!(
                    "milestones must be strictly increasing in (0,1), got {:?}",
                    self.milestones
                )));
            }
            prev = m;
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize, total_epochs: usize) -> f64 {
        let frac = epoch as f64 / total_epochs as f64;
        let passed = self.milestones.iter().filter(|&&m| frac >= m).count();
        self.base_lr * self.decay_factor.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_plain_step() {
        // mu=0, wd=0, lr=0.1, theta=1, g=2 -> 0.8
        let mut st = SgdState::<f64>::new(0.1, 0.0, 0.0, 1);
        let mut p = Tensor::from_f64_slice(vec![1], &[1.0]).unwrap();
        st.step(0, &mut p, &[2.0]).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grad_is_identity() {
        let mut st = SgdState::<f64>::new(0.1, 0.0, 0.0, 1);
        let mut p = Tensor::from_f64_slice(vec![2], &[1.0, -3.0]).unwrap();
        st.step(0, &mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p.to_f64_vec(), vec![1.0, -3.0]);
    }

    #[test]
    fn sgd_momentum_matches_hand_unrolled_recurrence() {
        let mut st = SgdState::<f64>::new(0.1, 0.9, 0.0, 1);
        let mut p = Tensor::from_f64_slice(vec![1], &[1.0]).unwrap();
        st.step(0, &mut p, &[2.0]).unwrap();
        st.step(0, &mut p, &[1.0]).unwrap();
        // v1 = 2, theta1 = 1 - 0.2 = 0.8
        // v2 = 0.9*2 + 1 = 2.8, theta2 = 0.8 - 0.28 = 0.52
        assert!((p.data()[0] - 0.52).abs() < 1e-12);
    }

    #[test]
    fn sgd_mismatched_gradient_errors() {
        let mut st = SgdState::<f64>::new(0.1, 0.0, 0.0, 1);
        let mut p = Tensor::from_f64_slice(vec![2], &[1.0, 2.0]).unwrap();
        assert!(st.step(0, &mut p, &[1.0]).is_err());
    }

    #[test]
    fn lr_schedule_paper_values() {
        let s = StepLrSchedule::default();
        assert_eq!(s.lr_at(0, 200), 0.01);
        assert!((s.lr_at(130, 200) - 0.001).abs() < 1e-15);
        assert!((s.lr_at(170, 200) - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn lr_is_non_increasing() {
        let s = StepLrSchedule::default();
        let mut prev = f64::INFINITY;
        for e in 0..200 {
            let lr = s.lr_at(e, 200);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn bad_milestones_rejected() {
        let s = StepLrSchedule {
            base_lr: 0.01,
            milestones: vec![0.8, 0.6],
            decay_factor: 0.1,
        };
        assert!(s.validate().is_err());
    }
}
