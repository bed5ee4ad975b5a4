//! Adam, cosine annealing with warm restarts, and parameter snapshots.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("gradient count or shape does not match the parameters")]
    GradientMismatch,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(&'static str),
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers mirror the parameter list; they are kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub lr: f64,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Real>(params: &[Tensor<T>], config: AdamConfig, lr: f64) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect::<Vec<_>>();
        Self { config, lr, step_count: 0, m: zeros(), v: zeros() }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }
}

/// One Adam update. Gradients are validated before anything is modified, so
/// a rejected step leaves parameters and state untouched.
pub fn adam_step<T: Real>(params: &mut [Tensor<T>], grads: &[&[T]], state: &mut AdamState) -> Result<(), OptimError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(OptimError::GradientMismatch);
    }
    for (index, (p, g)) in params.iter().zip(grads).enumerate() {
        if g.len() != p.numel() {
            return Err(OptimError::GradientMismatch);
        }
        if !g.iter().all(|x| x.is_finite()) {
            return Err(OptimError::NonFiniteGradient { index });
        }
    }
    state.step_count += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step_count as i32;
    let c1 = 1.0 - Float::powi(beta1, t);
    let c2 = 1.0 - Float::powi(beta2, t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((w, g), m), v) in p.data_mut().iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g.widen();
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let step = state.lr * (*m / c1) / (Float::sqrt(*v / c2) + eps);
            *w = T::from_f64_lossy(w.widen() - step);
        }
    }
    Ok(())
}

/// Cosine annealing with warm restarts, stepped per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdrSchedule {
    pub eta_max: f64,
    pub eta_min: f64,
    pub t0: u64,
    pub t_mult: u64,
}

impl SgdrSchedule {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.eta_max.is_finite() && self.eta_min.is_finite()) {
            return Err(OptimError::InvalidSchedule("rates must be finite"));
        }
        if !(self.eta_max >= self.eta_min && self.eta_min >= 0.0) {
            return Err(OptimError::InvalidSchedule("need eta_max >= eta_min >= 0"));
        }
        if self.t0 == 0 {
            return Err(OptimError::InvalidSchedule("t0 must be at least 1"));
        }
        if self.t_mult == 0 {
            return Err(OptimError::InvalidSchedule("t_mult must be at least 1"));
        }
        Ok(())
    }

    /// (cycle index, epochs elapsed in the cycle, cycle length).
    pub fn locate(&self, epoch: u64) -> (u64, u64, u64) {
        let mut start = 0u64;
        let mut len = self.t0.max(1);
        let mut cycle = 0;
        if self.t_mult <= 1 {
            return (epoch / len, epoch % len, len);
        }
        while epoch >= start + len {
            start += len;
            len = len.saturating_mul(self.t_mult);
            cycle += 1;
        }
        (cycle, epoch - start, len)
    }

    /// Learning rate at a 0-based epoch.
    pub fn lr_at(&self, epoch: u64) -> f64 {
        let (_, t, len) = self.locate(epoch);
        self.eta_at(t as f64 / len as f64)
    }

    /// Rate at fractional cycle progress `t/T` in `[0, 1]`.
    pub fn eta_at(&self, progress: f64) -> f64 {
        self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (1.0 + Float::cos(PI * progress))
    }
}

/// Deep copy of named parameters taken at the end of `epoch`.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T> {
    pub epoch: u64,
    pub parameters: Vec<(String, Tensor<T>)>,
}

pub fn capture_snapshot<T: Real>(model: &crate::resunet::Model<T>, epoch: u64, at_epochs: &[u64]) -> Option<Snapshot<T>> {
    at_epochs.contains(&epoch).then(|| Snapshot {
        epoch,
        parameters: model.named_params().map(|(n, t)| (String::from(n), t.clone())).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resunet::{build_model, ArchConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sched(t0: u64, t_mult: u64) -> SgdrSchedule {
        SgdrSchedule { eta_max: 1e-3, eta_min: 0.0, t0, t_mult }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![Tensor::<f64>::from_vec([1, 1, 1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::new(&p, AdamConfig::default(), 1e-3);
        let g = [0.0f64; 3];
        for _ in 0..10 {
            adam_step(&mut p, &[&g[..]], &mut st).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step_count, 10);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        let mut p = vec![Tensor::<f64>::zeros([1, 1, 1, 1, 3])];
        let mut st = AdamState::new(&p, AdamConfig::default(), 1e-3);
        let g = [2.0, -0.5, 1e-3];
        adam_step(&mut p, &[&g[..]], &mut st).unwrap();
        for (w, g) in p[0].data().iter().zip(g) {
            let expect = -1e-3 * g / (g.abs() + 1e-8);
            assert!((w - expect).abs() < 1e-12, "{w} vs {expect}");
        }
    }

    #[test]
    fn non_finite_gradient_rejected_without_side_effects() {
        let mut p = vec![Tensor::<f32>::zeros([1, 1, 1, 1, 2])];
        let mut st = AdamState::new(&p, AdamConfig::default(), 1e-3);
        let g = [1.0f32, f32::NAN];
        assert_eq!(adam_step(&mut p, &[&g[..]], &mut st), Err(OptimError::NonFiniteGradient { index: 0 }));
        assert_eq!(st.step_count, 0);
        let short = [1.0f32];
        assert_eq!(adam_step(&mut p, &[&short[..]], &mut st), Err(OptimError::GradientMismatch));
    }

    #[test]
    fn quadratic_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let start: Vec<f64> = (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut p = vec![Tensor::from_vec([1, 1, 1, 1, 8], start).unwrap()];
            let mut st = AdamState::new(&p, AdamConfig::default(), 0.01);
            for _ in 0..2000 {
                let g: Vec<f64> = p[0].data().iter().map(|w| 2.0 * w).collect();
                adam_step(&mut p, &[&g[..]], &mut st).unwrap();
            }
            let norm = p[0].data().iter().map(|w| w * w).sum::<f64>().sqrt();
            assert!(norm < 1e-3, "norm {norm}");
        }
    }

    #[test]
    fn schedule_examples() {
        let s = sched(300, 1);
        assert_eq!(s.lr_at(0), 1e-3);
        assert!((s.lr_at(150) - 5e-4).abs() < 1e-15);
        assert_eq!(s.lr_at(300), 1e-3);
        assert_eq!(s.eta_at(1.0), 0.0);
        let z = SgdrSchedule { eta_max: 1e-4, ..sched(50, 1) };
        assert_eq!(z.lr_at(50), 1e-4);
        assert_eq!(z.lr_at(100), 1e-4);
    }

    #[test]
    fn growing_cycles_restart_at_the_right_epochs() {
        let s = sched(2, 2);
        let restarts: Vec<u64> = (0..30).filter(|&e| s.locate(e).1 == 0).collect();
        assert_eq!(restarts, vec![0, 2, 6, 14]);
        assert_eq!(s.locate(7), (2, 1, 8));
    }

    #[test]
    fn schedule_validation() {
        assert!(sched(1, 1).validate().is_ok());
        assert!(sched(0, 1).validate().is_err());
        assert!(sched(3, 0).validate().is_err());
        assert!(SgdrSchedule { eta_min: 1.0, ..sched(3, 1) }.validate().is_err());
    }

    #[test]
    fn snapshots_are_deep_copies() {
        let mut m = build_model::<f32>(&ArchConfig::tiny(), 1).unwrap();
        let at = [50, 100, 150];
        assert!(capture_snapshot(&m, 99, &at).is_none());
        let snap = capture_snapshot(&m, 100, &at).unwrap();
        assert_eq!(snap.epoch, 100);
        let orig = snap.parameters[0].1.clone();
        m.params_mut()[0].data_mut()[0] += 1.0;
        assert_eq!(snap.parameters[0].1, orig);
        assert_eq!(snap.parameters.len(), m.params().len());
    }

    proptest! {
        #[test]
        fn lr_within_bounds_and_max_at_restarts(t0 in 1u64..40, mult in 1u64..4, epoch in 0u64..500) {
            let s = SgdrSchedule { eta_max: 0.3, eta_min: 0.01, t0, t_mult: mult };
            let lr = s.lr_at(epoch);
            prop_assert!(lr >= 0.01 - 1e-15 && lr <= 0.3 + 1e-15);
            let (_, t, len) = s.locate(epoch);
            prop_assert!(t < len);
            if t == 0 { prop_assert_eq!(lr, 0.3); }
        }

        #[test]
        fn lr_is_nonincreasing_within_a_cycle(t0 in 2u64..60, epoch in 0u64..400) {
            let s = SgdrSchedule { eta_max: 1.0, eta_min: 0.0, t0, t_mult: 1 };
            if s.locate(epoch + 1).1 != 0 {
                prop_assert!(s.lr_at(epoch + 1) <= s.lr_at(epoch));
            }
        }
    }
}
