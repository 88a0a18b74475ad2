use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Init, Program};
use crate::engine::{BatchStats, Float, Tensor};
use crate::error::{check_dim, Result};

/// Exponential moving averages of batch-norm statistics for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running = (1 - momentum) * running + momentum * batch`, using the
    /// unbiased batch variance.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        let correction = if batch.count > 1 {
            batch.count as f64 / (batch.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * batch.mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * batch.var[c] * correction;
        }
    }
}

/// Learnable tensors of a program plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Float> {
    pub values: Vec<Tensor<T>>,
    pub running: Vec<RunningStats>,
}

impl<T: Float> ParamStore<T> {
    /// Draws initial values for every declared parameter from `seed`.
    pub fn init(prog: &Program, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = prog
            .params
            .iter()
            .map(|d| match d.init {
                Init::Zeros => Tensor::zeros(d.shape),
                Init::Ones => Tensor::full(d.shape, T::ONE),
                Init::Constant(v) => Tensor::full(d.shape, T::from_f64(v)),
                Init::Kaiming { fan_in } => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    let data = (0..d.shape.numel()).map(|_| T::from_f64(normal.sample(&mut rng))).collect();
                    Tensor::from_vec(d.shape, data).expect("length matches shape")
                }
            })
            .collect();
        let running = prog.bns.iter().map(|b| RunningStats::new(b.channels)).collect();
        ParamStore { values, running }
    }

    /// Checks that the store lines up with `prog` tensor by tensor.
    pub fn validate(&self, prog: &Program) -> Result<()> {
        check_dim("param_store", "params", prog.params.len(), self.values.len())?;
        check_dim("param_store", "batch_norms", prog.bns.len(), self.running.len())?;
        for (d, v) in prog.params.iter().zip(&self.values) {
            check_dim("param_store", "numel", d.shape.numel(), v.numel())?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            values: self.values.iter().map(Tensor::cast).collect(),
            running: self.running.clone(),
        }
    }
}
