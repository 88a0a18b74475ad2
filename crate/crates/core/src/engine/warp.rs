//! Differentiable bilinear resampling along a fixed per-sample grid, with an
//! optional channel permutation. Used to warp heatmaps inside the loss.

use super::sample::Tap;
use super::tape::{Backward, Tape, Var};
use super::{Float, Shape, Tensor};
use crate::error::{check_dim, Error, Result};

/// Source locations for every output pixel of every sample, plus the input
/// channel each output channel reads from.
#[derive(Clone, Debug)]
pub struct SamplingGrid {
    pub height: usize,
    pub width: usize,
    /// One `(y, x)` per output pixel, row-major, per sample.
    pub coords: Vec<Vec<(f64, f64)>>,
    /// `source_channel[n][c]` is the input channel copied into output channel `c`.
    pub source_channel: Vec<Vec<usize>>,
}

impl SamplingGrid {
    pub fn identity(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        let coords: Vec<(f64, f64)> = (0..height)
            .flat_map(|y| (0..width).map(move |x| (y as f64, x as f64)))
            .collect();
        SamplingGrid {
            height,
            width,
            coords: vec![coords; batch],
            source_channel: vec![(0..channels).collect(); batch],
        }
    }

    fn validate(&self, s: Shape) -> Result<()> {
        check_dim("warp", "batch", self.coords.len(), s.n())?;
        check_dim("warp", "batch", self.source_channel.len(), s.n())?;
        for (coords, perm) in self.coords.iter().zip(&self.source_channel) {
            check_dim("warp", "grid", self.height * self.width, coords.len())?;
            check_dim("warp", "channels", s.c(), perm.len())?;
            if perm.iter().any(|&c| c >= s.c()) {
                return Err(Error::config("warp: channel permutation out of range"));
            }
        }
        Ok(())
    }

    fn taps<T: Float>(&self, n: usize) -> Vec<Tap<T>> {
        self.coords[n].iter().map(|&(y, x)| Tap::at_f64(y, x)).collect()
    }
}

pub fn warp_forward<T: Float>(x: &Tensor<T>, grid: &SamplingGrid) -> Result<Tensor<T>> {
    let s = x.shape();
    grid.validate(s)?;
    let os = s.with_hw(grid.height, grid.width);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n() {
        let taps = grid.taps::<T>(n);
        for (c, &src) in grid.source_channel[n].iter().enumerate() {
            let plane = x.plane(n, src);
            let dst = out.plane_mut(n, c);
            for (d, t) in dst.iter_mut().zip(&taps) {
                *d = t.sample(plane, s.h(), s.w());
            }
        }
    }
    Ok(out)
}

struct WarpRule {
    grid: SamplingGrid,
}

impl<T: Float> Backward<T> for WarpRule {
    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, grad: &[T], _wants: &[bool]) -> Vec<Option<Vec<T>>> {
        let s = inputs[0].shape();
        let os = out.shape();
        let mut dx = vec![T::ZERO; s.numel()];
        for n in 0..s.n() {
            let taps = self.grid.taps::<T>(n);
            for (c, &src) in self.grid.source_channel[n].iter().enumerate() {
                let g = &grad[(n * os.c() + c) * os.plane()..][..os.plane()];
                let d = &mut dx[(n * s.c() + src) * s.plane()..][..s.plane()];
                for (t, &gv) in taps.iter().zip(g) {
                    t.scatter(d, s.h(), s.w(), gv);
                }
            }
        }
        vec![Some(dx)]
    }
}

impl<T: Float> Tape<T> {
    /// Bilinear warp along `grid`; the gradient flows to `x` only.
    pub fn warp(&mut self, x: Var, grid: &SamplingGrid) -> Result<Var> {
        let out = warp_forward(self.value(x), grid)?;
        self.record("warp", out, vec![x], WarpRule { grid: grid.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_grid_is_bit_exact() {
        let x = Tensor::<f32>::from_vec(Shape::new(2, 2, 3, 3), (0..36).map(|v| v as f32 * 0.1).collect()).unwrap();
        let y = warp_forward(&x, &SamplingGrid::identity(2, 2, 3, 3)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn permutation_swaps_channels() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, 2.0]).unwrap();
        let mut grid = SamplingGrid::identity(1, 2, 1, 1);
        grid.source_channel[0] = vec![1, 0];
        assert_eq!(warp_forward(&x, &grid).unwrap().data(), &[2.0, 1.0]);
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <W x, g> == <x, W^T g> for a random grid.
        let s = Shape::new(1, 1, 4, 5);
        let x: Vec<f64> = (0..20).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let g: Vec<f64> = (0..20).map(|i| ((i * 3) % 7) as f64 * 0.5).collect();
        let mut grid = SamplingGrid::identity(1, 1, 4, 5);
        for (i, c) in grid.coords[0].iter_mut().enumerate() {
            c.0 += 0.3 * (i as f64).sin();
            c.1 -= 0.7 * (i as f64).cos();
        }
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(Tensor::from_vec(s, x.clone()).unwrap(), true);
        let y = tape.warp(xv, &grid).unwrap();
        let lhs: f64 = tape.value(y).data().iter().zip(&g).map(|(a, b)| a * b).sum();
        let grads = tape.backward_with(y, g).unwrap();
        let rhs: f64 = grads.get(xv).unwrap().iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
