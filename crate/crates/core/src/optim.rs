//! AdamW with decoupled weight decay and a linear-warmup, cosine-decay
//! learning-rate schedule.
//!
//! ```text
//! theta <- theta * (1 - lr * wd)
//! m     <- b1 * m + (1 - b1) * g
//! v     <- b2 * v + (1 - b2) * g^2
//! theta <- theta - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
//! ```

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSpec {
    pub lr_init: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for OptimSpec {
    fn default() -> Self {
        Self::stage1()
    }
}

impl OptimSpec {
    /// End-to-end training: 30 epochs, 2 warmup. The learning rate suits the
    /// small from-scratch models here; see [`OptimSpec::reference_full`] for
    /// the fine-tuning value of 1e-5.
    pub fn stage1() -> Self {
        Self {
            lr_init: 1e-2,
            weight_decay: 1e-7,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 64,
            epochs: 30,
            warmup_epochs: 2,
            seed: 0,
        }
    }

    /// Classifier-only training: 12 epochs, 1 warmup.
    pub fn stage2() -> Self {
        Self {
            epochs: 12,
            warmup_epochs: 1,
            ..Self::stage1()
        }
    }

    /// Fine-tuning settings for pretrained deep backbones (lr 1e-5).
    pub fn reference_full() -> Self {
        Self {
            lr_init: 1e-5,
            ..Self::stage1()
        }
    }

    pub fn reference_classifier() -> Self {
        Self {
            lr_init: 1e-5,
            ..Self::stage2()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init.is_finite() && self.lr_init > 0.0) {
            return Err(Error::invalid("lr_init must be > 0"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be >= 0"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::invalid("eps must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        // epochs = 0 is allowed and means "no training".
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::invalid("warmup_epochs must be smaller than epochs"));
        }
        Ok(())
    }
}

/// Learning rate at `step` of `total_steps`: linear from 0 to `lr_init` over
/// `warmup_steps`, then half-cosine down to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, lr_init: f64) -> f64 {
    debug_assert!(warmup_steps < total_steps && step <= total_steps);
    if step < warmup_steps {
        return lr_init * step as f64 / warmup_steps as f64;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    lr_init * 0.5 * (1.0 + (PI * progress).cos())
}

/// First/second moment accumulators, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl OptimState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One AdamW update of every tensor in `params` with the matching `grads`.
pub fn optimizer_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut OptimState,
    spec: &OptimSpec,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} parameter tensors, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::Shape(format!(
                "tensor {i}: {} params, {} grads, {} slots",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter tensor {i}"
            )));
        }
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::invalid(format!("learning rate {lr}")));
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - spec.beta1.powi(t);
    let bc2 = 1.0 - spec.beta2.powi(t);
    let decay = 1.0 - lr * spec.weight_decay;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in 0..p.len() {
            m[k] = spec.beta1 * m[k] + (1.0 - spec.beta1) * g[k];
            v[k] = spec.beta2 * v[k] + (1.0 - spec.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] = p[k] * decay - lr * m_hat / (v_hat.sqrt() + spec.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let lr = 3e-3;
        assert_eq!(lr_at(0, 100, 10, lr), 0.0);
        assert_eq!(lr_at(10, 100, 10, lr), lr);
        assert!((lr_at(55, 100, 10, lr) - 0.5 * lr).abs() < 1e-18);
        assert_eq!(lr_at(100, 100, 10, lr), 0.0);
        assert_eq!(lr_at(5, 100, 10, lr), 0.5 * lr);
        assert_eq!(lr_at(0, 100, 0, lr), lr);
    }

    #[test]
    fn zero_lr_and_decay_is_a_no_op() {
        let spec = OptimSpec {
            weight_decay: 0.0,
            ..OptimSpec::stage1()
        };
        let mut p = vec![0.3, -1.0];
        let before = p.clone();
        let mut st = OptimState::new(&[2]);
        optimizer_step(&mut [&mut p], &[&[0.5, -2.0]], &mut st, &spec, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let spec = OptimSpec {
            weight_decay: 0.0,
            ..OptimSpec::stage1()
        };
        let eps_lr = 1e-3;
        let mut p = vec![2.0];
        let mut st = OptimState::new(&[1]);
        optimizer_step(&mut [&mut p], &[&[1.0]], &mut st, &spec, eps_lr).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        assert!((2.0 - p[0] - eps_lr / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let spec = OptimSpec {
            weight_decay: 0.1,
            ..OptimSpec::stage1()
        };
        let lr = 0.5;
        let mut p = vec![1.0, -4.0];
        let mut st = OptimState::new(&[2]);
        for k in 1..=5 {
            optimizer_step(&mut [&mut p], &[&[0.0, 0.0]], &mut st, &spec, lr).unwrap();
            let f = (1.0 - lr * 0.1_f64).powi(k);
            assert!((p[0] - f).abs() < 1e-12 && (p[1] + 4.0 * f).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let mut a = vec![0.0];
        let mut b = vec![0.0];
        let mut st = OptimState::new(&[1, 1]);
        let e = optimizer_step(
            &mut [&mut a, &mut b],
            &[&[0.0], &[f64::NAN]],
            &mut st,
            &OptimSpec::stage1(),
            0.1,
        )
        .unwrap_err();
        assert!(e.to_string().contains("tensor 1"), "{e}");
    }

    #[test]
    fn spec_validation() {
        assert!(OptimSpec::stage1().validate().is_ok());
        assert!(OptimSpec::reference_classifier().validate().is_ok());
        let bad = OptimSpec {
            warmup_epochs: 30,
            ..OptimSpec::stage1()
        };
        assert!(bad.validate().is_err());
        let bad = OptimSpec {
            beta2: 1.0,
            ..OptimSpec::stage1()
        };
        assert!(bad.validate().is_err());
    }
}
