//! Softmax cross-entropy, focal loss and class-balanced focal loss, each with
//! its exact gradient with respect to the logits.
//!
//! With `p = softmax(z)`, true class `t`, class weight `w` and focusing
//! parameter `gamma`, the per-instance loss is
//!
//! ```text
//! L = w * (1 - p_t)^gamma * (-ln p_t)
//! ```
//!
//! and its logit gradient is `w * F * (delta_tk - p_k)` with
//! `F = gamma * (1 - p_t)^(gamma - 1) * p_t * ln p_t - (1 - p_t)^gamma`.
//! Cross-entropy is the `gamma = 0, w = 1` case. The class-balanced weight is
//! the inverse effective number of samples, `(1 - beta) / (1 - beta^n)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossKind {
    CrossEntropy,
    Focal { gamma: f64 },
    CbFocal { gamma: f64, beta: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Optional extra per-class multipliers, all > 0.
    pub class_weights: Option<Vec<f64>>,
}

impl LossSpec {
    pub fn cross_entropy() -> Self {
        Self {
            kind: LossKind::CrossEntropy,
            class_weights: None,
        }
    }

    pub fn focal(gamma: f64) -> Self {
        Self {
            kind: LossKind::Focal { gamma },
            class_weights: None,
        }
    }

    pub fn cb_focal(gamma: f64, beta: f64) -> Self {
        Self {
            kind: LossKind::CbFocal { gamma, beta },
            class_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LossKind::CrossEntropy => {}
            LossKind::Focal { gamma } => check_gamma(gamma)?,
            LossKind::CbFocal { gamma, beta } => {
                check_gamma(gamma)?;
                if !(0.0..1.0).contains(&beta) {
                    return Err(Error::invalid(format!(
                        "cb beta must lie in [0, 1), got {beta}"
                    )));
                }
            }
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
                return Err(Error::invalid("class weights must be finite and > 0"));
            }
        }
        Ok(())
    }

    fn gamma(&self) -> f64 {
        match self.kind {
            LossKind::CrossEntropy => 0.0,
            LossKind::Focal { gamma } | LossKind::CbFocal { gamma, .. } => gamma,
        }
    }

    /// Per-class weight used for instances of class `class` with `n` training samples.
    fn class_weight(&self, class: usize, n: usize) -> f64 {
        let base = match self.kind {
            LossKind::CbFocal { beta, .. } => cb_weight(n, beta),
            _ => 1.0,
        };
        match &self.class_weights {
            Some(w) => base * w[class],
            None => base,
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_finite() && gamma >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "focal gamma must be >= 0, got {gamma}"
        )))
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    Ok(out)
}

/// Unchecked softmax into `out`. Inputs must be finite.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// `(1 - p)^gamma * (-ln p)`, with `p` floored at [`PROB_FLOOR`].
pub fn focal_loss(p: f64, gamma: f64) -> f64 {
    focal_from_parts(p, 1.0 - p, gamma)
}

fn focal_from_parts(p: f64, one_minus_p: f64, gamma: f64) -> f64 {
    let nll = -p.max(PROB_FLOOR).ln();
    if gamma == 0.0 {
        nll
    } else {
        one_minus_p.max(0.0).powf(gamma) * nll
    }
}

/// Inverse effective number of samples, `(1 - beta) / (1 - beta^n)`.
pub fn cb_weight(n: usize, beta: f64) -> f64 {
    (1.0 - beta) / (1.0 - beta.powf(n as f64))
}

/// Loss over a batch, mean-reduced, with the exact gradient of the mean.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub per_instance: Vec<f64>,
    pub grad_logits: Matrix,
}

/// Evaluates `spec` on a batch of logits. `counts` are the training counts
/// per class (only read by the class-balanced loss).
pub fn batch_loss(
    logits: &Matrix,
    labels: &[usize],
    counts: &[usize],
    spec: &LossSpec,
) -> Result<LossValue> {
    spec.validate()?;
    let (b, c) = (logits.rows(), logits.cols());
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "{b} logit rows but {} labels",
            labels.len()
        )));
    }
    if b == 0 {
        return Err(Error::NoInstances);
    }
    if matches!(spec.kind, LossKind::CbFocal { .. }) && counts.len() != c {
        return Err(Error::Shape(format!(
            "{} class counts for {c} logits",
            counts.len()
        )));
    }
    if let Some(w) = &spec.class_weights {
        if w.len() != c {
            return Err(Error::Shape(format!(
                "{} class weights for {c} logits",
                w.len()
            )));
        }
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits".into()));
    }

    let gamma = spec.gamma();
    let scale = 1.0 / b as f64;
    let mut per_instance = Vec::with_capacity(b);
    let mut grad = Matrix::zeros(b, c);
    let mut p = vec![0.0; c];
    for (i, &t) in labels.iter().enumerate() {
        if t >= c {
            return Err(Error::invalid(format!(
                "label {t} out of range for {c} classes"
            )));
        }
        softmax_into(logits.row(i), &mut p);
        let pt = p[t];
        // Summing the other probabilities keeps 1 - p_t accurate when p_t ~ 1.
        let rest: f64 = p
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != t)
            .map(|(_, &v)| v)
            .sum();
        let w = spec.class_weight(t, counts.get(t).copied().unwrap_or(1));
        per_instance.push(w * focal_from_parts(pt, rest, gamma));

        let factor = if gamma == 0.0 {
            -1.0
        } else if rest == 0.0 {
            0.0
        } else {
            gamma * rest.powf(gamma - 1.0) * pt * pt.max(PROB_FLOOR).ln() - rest.powf(gamma)
        };
        let g = grad.row_mut(i);
        let coef = w * factor * scale;
        for (k, gk) in g.iter_mut().enumerate() {
            let delta = if k == t { 1.0 } else { 0.0 };
            *gk = coef * (delta - p[k]);
        }
    }
    let total = per_instance.iter().sum::<f64>() * scale;
    Ok(LossValue {
        total,
        per_instance,
        grad_logits: grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let s = softmax(&[1000.0, 0.0]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15 && s[1] >= 0.0 && s[1] < 1e-300);
        let s = softmax(&[std::f64::consts::LN_2, 0.0]).unwrap();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15 && (s[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn focal_examples() {
        assert!((focal_loss(0.2, 0.0) - 1.609_437_912_434_100_3).abs() < 1e-12);
        assert_eq!(focal_loss(1.0, 2.0), 0.0);
        assert_eq!(focal_loss(1.0, 0.5), 0.0);
        // (0.1)^2 * -ln(0.9)
        assert!((focal_loss(0.9, 2.0) - 0.01 * 0.105_360_515_657_826_3).abs() < 1e-12);
        assert!(focal_loss(0.0, 2.0).is_finite());
    }

    #[test]
    fn cb_weight_examples() {
        assert!((cb_weight(1, 0.9) - 1.0).abs() < 1e-15);
        assert!((cb_weight(2, 0.9) - 0.1 / 0.19).abs() < 1e-12);
        assert!((cb_weight(1_000_000, 0.9) - 0.1).abs() < 1e-12);
        assert_eq!(cb_weight(5, 0.0), 1.0);
    }

    #[test]
    fn cross_entropy_single_instance() {
        let z = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let v = batch_loss(&z, &[0], &[1, 1], &LossSpec::cross_entropy()).unwrap();
        assert!((v.total - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(v.grad_logits.row(0), &[-0.5, 0.5]);
    }

    #[test]
    fn cb_focal_degenerates_to_cross_entropy() {
        let z = Matrix::from_rows(&[vec![0.3, -1.2, 2.0], vec![1.0, 0.5, -0.5]]).unwrap();
        let labels = [2, 0];
        let ce = batch_loss(&z, &labels, &[5, 7, 9], &LossSpec::cross_entropy()).unwrap();
        let cb = batch_loss(&z, &labels, &[5, 7, 9], &LossSpec::cb_focal(0.0, 0.0)).unwrap();
        let fo = batch_loss(&z, &labels, &[5, 7, 9], &LossSpec::focal(0.0)).unwrap();
        assert!((ce.total - cb.total).abs() < 1e-12);
        assert!((ce.total - fo.total).abs() < 1e-12);
        for (a, b) in ce
            .grad_logits
            .as_slice()
            .iter()
            .zip(cb.grad_logits.as_slice())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_loss_rejects_bad_labels_and_specs() {
        let z = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(batch_loss(&z, &[2], &[1, 1], &LossSpec::cross_entropy()).is_err());
        assert!(batch_loss(&z, &[0, 1], &[1, 1], &LossSpec::cross_entropy()).is_err());
        assert!(batch_loss(&z, &[0], &[1, 1], &LossSpec::focal(-1.0)).is_err());
        assert!(batch_loss(&z, &[0], &[1, 1], &LossSpec::cb_focal(2.0, 1.0)).is_err());
        assert!(batch_loss(&z, &[0], &[1], &LossSpec::cb_focal(2.0, 0.9)).is_err());
    }

    #[test]
    fn saturated_logits_keep_gradients_finite() {
        let z = Matrix::from_rows(&[vec![800.0, -800.0, 0.0]]).unwrap();
        for spec in [
            LossSpec::focal(0.5),
            LossSpec::focal(2.0),
            LossSpec::cb_focal(2.0, 0.9),
        ] {
            for label in 0..3 {
                let v = batch_loss(&z, &[label], &[3, 3, 3], &spec).unwrap();
                assert!(v.total.is_finite());
                assert!(v.grad_logits.all_finite());
            }
        }
    }
}
