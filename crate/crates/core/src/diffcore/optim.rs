//! First-order optimizers over a [`ParamStore`] with a warmup + cosine
//! learning-rate schedule.

use crate::config::OptimizerKind;
use crate::diffcore::store::ParamStore;
use crate::error::{Error, Result};

/// Adam defaults.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning-rate schedule: constant `base_lr` during warmup, then a cosine
/// decay toward zero across the remaining steps.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    /// Flat schedule (no decay), used when the step horizon is unknown.
    pub fn constant(base_lr: f64) -> Self {
        Schedule {
            base_lr,
            warmup_steps: 0,
            total_steps: 0,
        }
    }

    /// Learning rate for 0-indexed optimizer step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr;
        }
        // Guard the cosine denominator when the post-warmup span is empty.
        if self.total_steps <= self.warmup_steps + 1 {
            return self.base_lr;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let t = (step - self.warmup_steps).min(self.total_steps - self.warmup_steps) as f64;
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * t / span).cos())
    }
}

/// Optimizer method plus schedule.
#[derive(Debug, Clone, Copy)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    /// SGD momentum coefficient; 0 gives plain SGD. Ignored by Adam.
    pub momentum: f64,
    pub schedule: Schedule,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64, schedule: Schedule) -> Result<Self> {
        if !momentum.is_finite() || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if !schedule.base_lr.is_finite() || schedule.base_lr < 0.0 {
            return Err(Error::Config(format!(
                "base_lr must be >= 0, got {}",
                schedule.base_lr
            )));
        }
        Ok(Optimizer {
            kind,
            momentum,
            schedule,
        })
    }
}

/// Applies one update from the accumulated gradients, then zeroes them and
/// advances the store's step counter. Requires a completed backward pass.
pub fn optimizer_step(opt: &Optimizer, store: &mut ParamStore) -> Result<()> {
    if !store.grads_ready() {
        return Err(Error::State(
            "optimizer step without populated gradients".into(),
        ));
    }
    let step = store.step_count();
    let lr = opt.schedule.lr_at(step);
    let names = store.names();
    match opt.kind {
        OptimizerKind::Sgd => {
            let mu = opt.momentum;
            for name in &names {
                let grad = store.grad(name)?.clone();
                {
                    let vel = store.opt_m_mut(name);
                    for (v, g) in vel.data_mut().iter_mut().zip(grad.data()) {
                        *v = mu * *v + g;
                    }
                }
                let vel = store.opt_m_mut(name).clone();
                let param = store.value_mut(name)?;
                for (p, v) in param.data_mut().iter_mut().zip(vel.data()) {
                    *p -= lr * v;
                }
                param.check_finite(&format!("sgd update of '{name}'"))?;
            }
        }
        OptimizerKind::Adam => {
            let t = (step + 1) as f64;
            let bias1 = 1.0 - ADAM_BETA1.powf(t);
            let bias2 = 1.0 - ADAM_BETA2.powf(t);
            for name in &names {
                let grad = store.grad(name)?.clone();
                {
                    let m = store.opt_m_mut(name);
                    for (mv, g) in m.data_mut().iter_mut().zip(grad.data()) {
                        *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * g;
                    }
                }
                {
                    let v = store.opt_v_mut(name);
                    for (vv, g) in v.data_mut().iter_mut().zip(grad.data()) {
                        *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * g * g;
                    }
                }
                let m = store.opt_m_mut(name).clone();
                let v = store.opt_v_mut(name).clone();
                let param = store.value_mut(name)?;
                for ((p, mv), vv) in param.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                    let m_hat = mv / bias1;
                    let v_hat = vv / bias2;
                    *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
                param.check_finite(&format!("adam update of '{name}'"))?;
            }
        }
    }
    store.zero_grads();
    store.bump_step();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::tape::Tape;
    use crate::diffcore::tensor::Tensor;

    fn quadratic_store(init: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::row(init).unwrap()).unwrap();
        s
    }

    /// Runs backward on loss = 0.5 * ||w||^2, whose gradient is w itself.
    fn half_norm_backward(store: &mut ParamStore) {
        let mut tape = Tape::new();
        let w = tape.param(store, "w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let sum = tape.sum_all(sq).unwrap();
        let loss = tape.scale(sum, 0.5).unwrap();
        tape.backward(loss, store).unwrap();
    }

    #[test]
    fn sgd_shrinks_quadratic_norm_monotonically() {
        let mut store = quadratic_store(vec![1.0, -2.0, 0.5]);
        let opt = Optimizer::new(OptimizerKind::Sgd, 0.0, Schedule::constant(0.1)).unwrap();
        let mut last = store.get("w").unwrap().frobenius_norm();
        for _ in 0..10 {
            half_norm_backward(&mut store);
            optimizer_step(&opt, &mut store).unwrap();
            let norm = store.get("w").unwrap().frobenius_norm();
            assert!(norm < last);
            last = norm;
        }
    }

    #[test]
    fn plain_sgd_matches_hand_update() {
        let mut store = quadratic_store(vec![2.0]);
        let opt = Optimizer::new(OptimizerKind::Sgd, 0.0, Schedule::constant(0.25)).unwrap();
        half_norm_backward(&mut store);
        optimizer_step(&opt, &mut store).unwrap();
        // w <- w - lr * w = 2 - 0.25 * 2 = 1.5
        assert!((store.get("w").unwrap().data()[0] - 1.5).abs() < 1e-15);
        assert_eq!(store.step_count(), 1);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut store = quadratic_store(vec![1.0]);
        let opt = Optimizer::new(OptimizerKind::Sgd, 0.5, Schedule::constant(0.1)).unwrap();
        half_norm_backward(&mut store);
        optimizer_step(&opt, &mut store).unwrap();
        // v1 = 1.0, w1 = 1 - 0.1 = 0.9
        assert!((store.get("w").unwrap().data()[0] - 0.9).abs() < 1e-15);
        half_norm_backward(&mut store);
        optimizer_step(&opt, &mut store).unwrap();
        // v2 = 0.5 * 1.0 + 0.9 = 1.4, w2 = 0.9 - 0.14 = 0.76
        assert!((store.get("w").unwrap().data()[0] - 0.76).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr_scale_free() {
        for scale in [1e-3, 1.0, 1e3] {
            let mut store = quadratic_store(vec![scale]);
            let opt = Optimizer::new(OptimizerKind::Adam, 0.0, Schedule::constant(0.01)).unwrap();
            half_norm_backward(&mut store);
            optimizer_step(&opt, &mut store).unwrap();
            let delta = scale - store.get("w").unwrap().data()[0];
            // Bias-corrected first step is lr * g / (|g| + eps) ~ lr.
            assert!(
                (delta - 0.01).abs() < 1e-5,
                "scale {scale} moved by {delta}"
            );
        }
    }

    #[test]
    fn step_without_gradients_is_a_state_error() {
        let mut store = quadratic_store(vec![1.0]);
        let opt = Optimizer::new(OptimizerKind::Sgd, 0.0, Schedule::constant(0.1)).unwrap();
        let err = optimizer_step(&opt, &mut store);
        assert!(matches!(err, Err(Error::State(_))));
        // After a real step the gradients are zeroed and the flag resets.
        half_norm_backward(&mut store);
        optimizer_step(&opt, &mut store).unwrap();
        assert!(!store.grads_ready());
        assert_eq!(store.grad("w").unwrap().data(), &[0.0]);
        assert!(matches!(
            optimizer_step(&opt, &mut store),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut store = quadratic_store(vec![3.0, -4.0]);
        let before = store.get("w").unwrap().clone();
        // Populate gradients with an explicit zero backward: loss = 0 * sum(w).
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let s = tape.sum_all(w).unwrap();
        let loss = tape.scale(s, 0.0).unwrap();
        tape.backward(loss, &mut store).unwrap();
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let opt = Optimizer::new(kind, 0.0, Schedule::constant(0.1)).unwrap();
            optimizer_step(&opt, &mut store).unwrap();
            assert_eq!(store.get("w").unwrap(), &before);
            // Re-populate for the next kind.
            let mut tape = Tape::new();
            let w = tape.param(&store, "w").unwrap();
            let s = tape.sum_all(w).unwrap();
            let loss = tape.scale(s, 0.0).unwrap();
            tape.backward(loss, &mut store).unwrap();
        }
    }

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        let s = Schedule {
            base_lr: 1.0,
            warmup_steps: 5,
            total_steps: 25,
        };
        for step in 0..5 {
            assert_eq!(s.lr_at(step), 1.0);
        }
        assert_eq!(s.lr_at(5), 1.0); // cosine starts at full rate
        let mut last = 1.0;
        for step in 6..25 {
            let lr = s.lr_at(step);
            assert!(lr < last, "step {step}: {lr} !< {last}");
            last = lr;
        }
        assert!(s.lr_at(24) > 0.0);
        assert!(s.lr_at(24) < 0.02);
        // Degenerate horizon keeps the rate constant instead of dividing by zero.
        let flat = Schedule {
            base_lr: 0.5,
            warmup_steps: 10,
            total_steps: 10,
        };
        assert_eq!(flat.lr_at(3), 0.5);
        assert_eq!(flat.lr_at(100), 0.5);
    }
}
