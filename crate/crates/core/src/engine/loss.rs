//! Scalar reductions used by the training objectives.

use super::elementwise::{same_shape, sigmoid};
use super::tape::{Backward, Tape, Var};
use super::{Float, Tensor};
use crate::error::Result;

/// `softplus(z) - t*z`, the sigmoid cross-entropy of logit `z` against a
/// soft target `t`, written to stay finite for large `|z|`.
#[inline]
pub fn bce_with_logits<T: Float>(z: T, t: T) -> T {
    let pos = if z > T::ZERO { z } else { T::ZERO };
    pos - z * t + (-z.abs()).exp().ln_1p()
}

struct SqDiffRule;

impl<T: Float> Backward<T> for SqDiffRule {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T], wants: &[bool]) -> Vec<Option<Vec<T>>> {
        let two_g = grad[0] + grad[0];
        let d: Vec<T> = inputs[0]
            .data()
            .iter()
            .zip(inputs[1].data())
            .map(|(&a, &b)| two_g * (a - b))
            .collect();
        vec![
            wants[0].then(|| d.clone()),
            wants[1].then(|| d.iter().map(|&v| -v).collect()),
        ]
    }
}

struct BceRule;

impl<T: Float> Backward<T> for BceRule {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T], wants: &[bool]) -> Vec<Option<Vec<T>>> {
        let g = grad[0];
        let (z, t) = (inputs[0].data(), inputs[1].data());
        vec![
            wants[0].then(|| z.iter().zip(t).map(|(&z, &t)| g * (sigmoid(z) - t)).collect()),
            wants[1].then(|| z.iter().map(|&z| -g * z).collect()),
        ]
    }
}

struct SumRule;

impl<T: Float> Backward<T> for SumRule {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T], _wants: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![grad[0]; inputs[0].numel()])]
    }
}

impl<T: Float> Tape<T> {
    /// `sum((a - b)^2)` over every element, as a scalar.
    pub fn sq_diff_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sq_diff_sum", va, vb)?;
        let s: T = va.data().iter().zip(vb.data()).map(|(&p, &q)| (p - q) * (p - q)).sum();
        self.record("sq_diff_sum", Tensor::scalar(s), vec![a, b], SqDiffRule)
    }

    /// Summed sigmoid cross-entropy of `logits` against `targets` in [0, 1].
    pub fn bce_logits_sum(&mut self, logits: Var, targets: Var) -> Result<Var> {
        let (vz, vt) = (self.value(logits), self.value(targets));
        same_shape("bce_logits_sum", vz, vt)?;
        let s: T = vz.data().iter().zip(vt.data()).map(|(&z, &t)| bce_with_logits(z, t)).sum();
        self.record("bce_logits_sum", Tensor::scalar(s), vec![logits, targets], BceRule)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.record("sum", Tensor::scalar(s), vec![x], SumRule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_matches_naive_form() {
        for &(z, t) in &[(0.3f64, 0.2), (-2.0, 0.9), (4.0, 0.0), (0.0, 0.5)] {
            let p = 1.0 / (1.0 + (-z).exp());
            let naive = -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
            assert!((bce_with_logits(z, t) - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_is_finite_for_extreme_logits() {
        assert!(bce_with_logits(1e3f32, 0.0).is_finite());
        assert!(bce_with_logits(-1e3f32, 1.0).is_finite());
    }
}
