use serde::{Deserialize, Serialize};

use crate::engine::elementwise::same_shape;
use crate::engine::{SamplingGrid, Tape, Var};
use crate::error::{Error, Result};

/// Prediction-to-ground-truth loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PgLoss {
    /// Sigmoid cross-entropy on logits against soft targets.
    #[serde(alias = "ce", alias = "CE")]
    Ce,
    /// Squared error between sigmoid outputs and targets.
    #[serde(alias = "mse", alias = "MSE")]
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the prediction-to-prediction coherence term.
    pub lambda: f64,
    pub pg_loss: PgLoss,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.001,
            pg_loss: PgLoss::Ce,
        }
    }
}

/// Scalar nodes of the objective, each already divided by
/// `batch * landmarks`. `pp` is unweighted; `total` applies `lambda`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub pp: Var,
    pub pg_orig: Var,
    pub pg_trans: Var,
    pub total: Var,
}

/// Coherent loss for one stack output.
///
/// `z_orig` and `z_trans` are head logits for the original and transformed
/// inputs; `gt` holds ground-truth maps of the original input. `grid`
/// encodes each sample's transform in heatmap space. The transformed
/// target is `gt_trans` when given, otherwise `gt` warped by `grid`.
pub fn coherent_loss(
    tape: &mut Tape<impl crate::engine::Float>,
    z_orig: Var,
    z_trans: Var,
    gt: Var,
    gt_trans: Option<Var>,
    grid: &SamplingGrid,
    w: &LossWeights,
) -> Result<LossTerms> {
    if w.lambda < 0.0 || !w.lambda.is_finite() {
        return Err(Error::config(format!("lambda must be non-negative, got {}", w.lambda)));
    }
    same_shape("coherent_loss", tape.value(z_orig), tape.value(z_trans))?;
    same_shape("coherent_loss", tape.value(z_orig), tape.value(gt))?;
    let s = tape.value(z_orig).shape();
    let norm = 1.0 / (s.n() * s.c()) as f64;

    let p_orig = tape.sigmoid(z_orig)?;
    let p_trans = tape.sigmoid(z_trans)?;
    let warped = tape.warp(p_orig, grid)?;
    let pp = tape.sq_diff_sum(p_trans, warped)?;

    let gt_t = match gt_trans {
        Some(g) => {
            same_shape("coherent_loss", tape.value(z_orig), tape.value(g))?;
            g
        }
        None => tape.warp(gt, grid)?,
    };
    let (pg_o, pg_t) = match w.pg_loss {
        PgLoss::Ce => (tape.bce_logits_sum(z_orig, gt)?, tape.bce_logits_sum(z_trans, gt_t)?),
        PgLoss::Mse => (tape.sq_diff_sum(p_orig, gt)?, tape.sq_diff_sum(p_trans, gt_t)?),
    };
    let weighted = tape.scale(pp, w.lambda)?;
    let sum = tape.add_n(&[weighted, pg_o, pg_t])?;
    Ok(LossTerms {
        pp: tape.scale(pp, norm)?,
        pg_orig: tape.scale(pg_o, norm)?,
        pg_trans: tape.scale(pg_t, norm)?,
        total: tape.scale(sum, norm)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::elementwise::sigmoid;
    use crate::engine::gradcheck::{check_graph, GradCheckConfig};
    use crate::engine::{Shape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(t: &Tape<f64>, v: Var) -> f64 {
        t.value(v).data()[0]
    }

    #[test]
    fn identity_with_equal_predictions_has_zero_pp() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::<f64>::uniform(Shape::new(2, 3, 8, 8), -2.0, 2.0, &mut rng);
        let g = Tensor::<f64>::uniform(Shape::new(2, 3, 8, 8), 0.0, 1.0, &mut rng);
        let mut t = Tape::new();
        let (a, b, gt) = (t.leaf(z.clone(), true), t.leaf(z, true), t.constant(g));
        let grid = SamplingGrid::identity(2, 3, 8, 8);
        let l = coherent_loss(&mut t, a, b, gt, None, &grid, &LossWeights::default()).unwrap();
        assert_eq!(scalar(&t, l.pp), 0.0);
        assert!(scalar(&t, l.total) > 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Shape::new(2, 2, 8, 8);
        let mut grid = SamplingGrid::identity(2, 2, 8, 8);
        grid.source_channel[1] = vec![1, 0];
        for c in grid.coords[0].iter_mut() {
            *c = (c.1 * 0.8 + 0.9, 7.0 - c.0 * 0.95);
        }
        let ins = [
            Tensor::uniform(s, -1.0, 1.0, &mut rng),
            Tensor::uniform(s, -1.0, 1.0, &mut rng),
            Tensor::uniform(s, 0.0, 1.0, &mut rng),
        ];
        for pg in [PgLoss::Ce, PgLoss::Mse] {
            let w = LossWeights { lambda: 0.7, pg_loss: pg };
            let rep = check_graph("coherent_loss", &ins, &[true, true, false], &GradCheckConfig::default(), |t, v| {
                Ok(coherent_loss(t, v[0], v[1], v[2], None, &grid, &w)?.total)
            })
            .unwrap();
            assert!(rep.passes(1e-3), "{pg:?}: {}", rep.max_rel_error);
        }
    }

    #[test]
    fn mse_total_is_zero_at_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Shape::new(1, 2, 4, 4);
        let z = Tensor::<f64>::uniform(s, -3.0, 3.0, &mut rng);
        let gt = z.map(sigmoid);
        // Mirror transform with swapped channels; integer sample points keep it exact.
        let mut grid = SamplingGrid::identity(1, 2, 4, 4);
        grid.source_channel[0] = vec![1, 0];
        for c in grid.coords[0].iter_mut() {
            c.1 = 3.0 - c.1;
        }
        let zt = crate::engine::warp::warp_forward(&z, &grid).unwrap();
        let mut t = Tape::new();
        let (a, b, g) = (t.leaf(z, true), t.leaf(zt, true), t.constant(gt));
        let w = LossWeights {
            lambda: 1.0,
            pg_loss: PgLoss::Mse,
        };
        let l = coherent_loss(&mut t, a, b, g, None, &grid, &w).unwrap();
        assert_eq!(scalar(&t, l.total), 0.0);
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let mut t = Tape::<f32>::new();
        let z = t.constant(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let w = LossWeights {
            lambda: -1.0,
            pg_loss: PgLoss::Ce,
        };
        let grid = SamplingGrid::identity(1, 1, 2, 2);
        assert!(coherent_loss(&mut t, z, z, z, None, &grid, &w).is_err());
    }
}
