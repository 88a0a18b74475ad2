//! Per-channel batch normalisation with learned scale and shift.

use super::tape::{Backward, Tape, Var};
use super::{Float, Tensor};
use crate::error::{check_dim, Result};

pub const BN_EPS: f64 = 1e-5;

/// Batch statistics measured by a training-mode forward pass. Variance is
/// the biased estimator used for normalisation.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of values each statistic was taken over.
    pub count: usize,
}

/// Normalises `x` with the given per-channel statistics, then applies
/// `gamma` and `beta`. Returns the output and the normalised activations.
fn normalise<T: Float>(x: &Tensor<T>, mean: &[f64], var: &[f64], gamma: &[T], beta: &[T]) -> (Tensor<T>, Vec<T>) {
    let s = x.shape();
    let plane = s.plane();
    let mut out = Tensor::zeros(s);
    let mut xhat = vec![T::ZERO; s.numel()];
    for c in 0..s.c() {
        let m = T::from_f64(mean[c]);
        let inv = T::from_f64(1.0 / (var[c] + BN_EPS).sqrt());
        for n in 0..s.n() {
            let off = (n * s.c() + c) * plane;
            let src = &x.data()[off..off + plane];
            let xh = &mut xhat[off..off + plane];
            for (d, &v) in xh.iter_mut().zip(src) {
                *d = (v - m) * inv;
            }
            let dst = &mut out.data_mut()[off..off + plane];
            for (d, &v) in dst.iter_mut().zip(xh.iter()) {
                *d = gamma[c] * v + beta[c];
            }
        }
    }
    (out, xhat)
}

pub fn channel_stats<T: Float>(x: &Tensor<T>) -> BatchStats {
    let s = x.shape();
    let plane = s.plane();
    let count = s.n() * plane;
    let mut mean = vec![0.0; s.c()];
    let mut var = vec![0.0; s.c()];
    for c in 0..s.c() {
        let mut sum = 0.0;
        for n in 0..s.n() {
            sum += x.plane(n, c).iter().map(|v| v.to_f64()).sum::<f64>();
        }
        let m = sum / count as f64;
        let mut sq = 0.0;
        for n in 0..s.n() {
            sq += x.plane(n, c).iter().map(|v| (v.to_f64() - m).powi(2)).sum::<f64>();
        }
        mean[c] = m;
        var[c] = sq / count as f64;
    }
    BatchStats { mean, var, count }
}

struct BatchNormTrainRule<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Float> Backward<T> for BatchNormTrainRule<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T], wants: &[bool]) -> Vec<Option<Vec<T>>> {
        let s = inputs[0].shape();
        let gamma = inputs[1].data();
        let plane = s.plane();
        let count = T::from_f64((s.n() * plane) as f64);
        let mut dx = vec![T::ZERO; s.numel()];
        let mut dgamma = vec![T::ZERO; s.c()];
        let mut dbeta = vec![T::ZERO; s.c()];
        for c in 0..s.c() {
            let (mut sg, mut sgx) = (T::ZERO, T::ZERO);
            for n in 0..s.n() {
                let off = (n * s.c() + c) * plane;
                for i in off..off + plane {
                    sg += grad[i];
                    sgx += grad[i] * self.xhat[i];
                }
            }
            dgamma[c] = sgx;
            dbeta[c] = sg;
            if wants[0] {
                let k = gamma[c] * self.inv_std[c] / count;
                for n in 0..s.n() {
                    let off = (n * s.c() + c) * plane;
                    for i in off..off + plane {
                        dx[i] = k * (count * grad[i] - sg - self.xhat[i] * sgx);
                    }
                }
            }
        }
        vec![wants[0].then_some(dx), wants[1].then_some(dgamma), wants[2].then_some(dbeta)]
    }
}

/// Evaluation mode: statistics are constants so the op is affine.
struct BatchNormEvalRule<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Float> Backward<T> for BatchNormEvalRule<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T], wants: &[bool]) -> Vec<Option<Vec<T>>> {
        let s = inputs[0].shape();
        let gamma = inputs[1].data();
        let plane = s.plane();
        let mut dx = vec![T::ZERO; s.numel()];
        let mut dgamma = vec![T::ZERO; s.c()];
        let mut dbeta = vec![T::ZERO; s.c()];
        for n in 0..s.n() {
            for c in 0..s.c() {
                let off = (n * s.c() + c) * plane;
                let k = gamma[c] * self.inv_std[c];
                for i in off..off + plane {
                    dgamma[c] += grad[i] * self.xhat[i];
                    dbeta[c] += grad[i];
                    dx[i] = k * grad[i];
                }
            }
        }
        vec![wants[0].then_some(dx), wants[1].then_some(dgamma), wants[2].then_some(dbeta)]
    }
}

fn check_affine<T: Float>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    let c = x.shape().c();
    check_dim("batch_norm", "gamma", c, gamma.numel())?;
    check_dim("batch_norm", "beta", c, beta.numel())
}

impl<T: Float> Tape<T> {
    /// Training-mode batch norm. Returns the output and the batch
    /// statistics so the caller can update running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        check_affine(xv, gv, bv)?;
        let stats = channel_stats(xv);
        let (out, xhat) = normalise(xv, &stats.mean, &stats.var, gv.data(), bv.data());
        let inv_std = stats.var.iter().map(|v| T::from_f64(1.0 / (v + BN_EPS).sqrt())).collect();
        let y = self.record("batch_norm", out, vec![x, gamma, beta], BatchNormTrainRule { xhat, inv_std })?;
        Ok((y, stats))
    }

    /// Inference-mode batch norm using stored running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        check_affine(xv, gv, bv)?;
        let c = xv.shape().c();
        check_dim("batch_norm", "running_mean", c, mean.len())?;
        check_dim("batch_norm", "running_var", c, var.len())?;
        let (out, xhat) = normalise(xv, mean, var, gv.data(), bv.data());
        let inv_std = var.iter().map(|v| T::from_f64(1.0 / (v + BN_EPS).sqrt())).collect();
        self.record("batch_norm", out, vec![x, gamma, beta], BatchNormEvalRule { xhat, inv_std })
    }
}
