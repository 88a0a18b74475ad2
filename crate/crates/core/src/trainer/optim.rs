use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{check_dim, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NadamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for NadamConfig {
    fn default() -> Self {
        NadamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments with a Nesterov look-ahead on the first moment.
#[derive(Clone, Debug, PartialEq)]
pub struct Nadam {
    pub config: NadamConfig,
    pub first: Vec<Tensor<f32>>,
    pub second: Vec<Tensor<f32>>,
    /// Updates applied so far.
    pub step: u64,
}

impl NadamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |b: f64| (0.0..1.0).contains(&b);
        if !ok(self.beta1) || !ok(self.beta2) || self.eps.is_nan() || self.eps <= 0.0 {
            return Err(crate::error::Error::config("nadam needs 0 <= beta < 1 and eps > 0"));
        }
        Ok(())
    }
}

impl Nadam {
    pub fn new(config: NadamConfig, params: &[Tensor<f32>]) -> Self {
        let zeros = |p: &Tensor<f32>| Tensor::zeros(p.shape());
        Nadam {
            config,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
            step: 0,
        }
    }

    /// One update of every parameter from its gradient.
    ///
    /// ```text
    /// m = b1 m + (1 - b1) g          v = b2 v + (1 - b2) g^2
    /// p -= lr (b1 m / (1 - b1^t) + (1 - b1) g / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    /// ```
    pub fn update(&mut self, params: &mut [Tensor<f32>], grads: &[Vec<f32>], lr: f64) -> Result<()> {
        check_dim("nadam", "params", self.first.len(), params.len())?;
        check_dim("nadam", "grads", params.len(), grads.len())?;
        self.step += 1;
        let NadamConfig { beta1: b1, beta2: b2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            check_dim("nadam", "numel", p.numel(), g.len())?;
            let iter = p.data_mut().iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut());
            for (((p, &g), m), v) in iter {
                let g = g as f64;
                let m_new = b1 * *m as f64 + (1.0 - b1) * g;
                let v_new = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = m_new as f32;
                *v = v_new as f32;
                let m_hat = (b1 * m_new + (1.0 - b1) * g) / c1;
                let v_hat = v_new / c2;
                *p = (*p as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = (max_norm / norm) as f32;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= k);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Shape;

    fn scalar(v: f32) -> Tensor<f32> {
        Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![v]).unwrap()
    }

    #[test]
    fn zero_betas_give_normalised_gradient_step() {
        let cfg = NadamConfig {
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-8,
        };
        let mut p = vec![scalar(1.5)];
        let mut opt = Nadam::new(cfg, &p);
        for (g, lr) in [(0.3f32, 0.1), (-2.0, 0.05)] {
            let before = p[0].data()[0] as f64;
            opt.update(&mut p, &[vec![g]], lr).unwrap();
            let want = before - lr * g as f64 / ((g as f64).abs() + 1e-8);
            assert_eq!(p[0].data()[0], want as f32);
        }
    }

    #[test]
    fn first_step_matches_closed_form() {
        // At t = 1, m = 0.1 g, so the look-ahead is (0.9 * 0.1 g + 0.1 g) / 0.1 = 1.9 g
        // and v_hat = g^2.
        let mut p = vec![scalar(0.0)];
        let mut opt = Nadam::new(NadamConfig::default(), &p);
        opt.update(&mut p, &[vec![0.5]], 0.01).unwrap();
        let want = -0.01 * 1.9 * 0.5 / (0.5 + 1e-8);
        assert!((p[0].data()[0] as f64 - want).abs() < 1e-7);
    }

    #[test]
    fn zero_learning_rate_leaves_params_bit_identical() {
        let mut p = vec![scalar(0.123_456_79)];
        let mut opt = Nadam::new(NadamConfig::default(), &p);
        opt.update(&mut p, &[vec![4.0]], 0.0).unwrap();
        assert_eq!(p[0].data()[0].to_bits(), 0.123_456_79f32.to_bits());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![vec![3.0f32], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-6 && (g[1][0] - 0.8).abs() < 1e-6);
        let mut small = vec![vec![0.1f32]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
