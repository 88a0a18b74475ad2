//! 2x max pooling and 2x nearest-neighbour up-sampling.

use super::tape::{Backward, Tape, Var};
use super::{Float, Tensor};
#[cfg(test)]
use super::Shape;
use crate::error::{Error, Result};

/// Forward 2x2/2 max pool. Returns the pooled tensor and, per output
/// element, the flat input index of the chosen maximum. Ties resolve to
/// the first maximal element in row-major window order.
pub fn max_pool2d_forward<T: Float>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let s = x.shape();
    for (axis, size) in [("height", s.h()), ("width", s.w())] {
        if size % 2 != 0 {
            return Err(Error::Dimension {
                op: "max_pool2d",
                axis,
                expected: size + 1,
                found: size,
            });
        }
    }
    let (ho, wo) = (s.h() / 2, s.w() / 2);
    let mut out = Tensor::zeros(s.with_hw(ho, wo));
    let mut arg = vec![0u32; out.numel()];
    let xd = x.data();
    let od = out.data_mut();
    for nc in 0..s.n() * s.c() {
        let base = nc * s.plane();
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + (2 * oy) * s.w() + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * s.w() + 2 * ox + dx;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                let o = nc * ho * wo + oy * wo + ox;
                od[o] = xd[best];
                arg[o] = best as u32;
            }
        }
    }
    Ok((out, arg))
}

struct PoolRule {
    argmax: Vec<u32>,
}

impl<T: Float> Backward<T> for PoolRule {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T], _wants: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut dx = vec![T::ZERO; inputs[0].numel()];
        for (&a, &g) in self.argmax.iter().zip(grad) {
            dx[a as usize] += g;
        }
        vec![Some(dx)]
    }
}

pub fn upsample_nearest2x_forward<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s.h(), s.w());
    let mut out = Tensor::zeros(s.with_hw(2 * h, 2 * w));
    let xd = x.data();
    let od = out.data_mut();
    for nc in 0..s.n() * s.c() {
        let src = &xd[nc * h * w..(nc + 1) * h * w];
        let dst = &mut od[nc * 4 * h * w..(nc + 1) * 4 * h * w];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let (r0, r1) = dst[2 * y * 2 * w..(2 * y + 2) * 2 * w].split_at_mut(2 * w);
            for (x_, &v) in row.iter().enumerate() {
                r0[2 * x_] = v;
                r0[2 * x_ + 1] = v;
            }
            r1.copy_from_slice(r0);
        }
    }
    out
}

struct UpsampleRule;

impl<T: Float> Backward<T> for UpsampleRule {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T], _wants: &[bool]) -> Vec<Option<Vec<T>>> {
        let s = inputs[0].shape();
        let (h, w) = (s.h(), s.w());
        let mut dx = vec![T::ZERO; s.numel()];
        for nc in 0..s.n() * s.c() {
            let g = &grad[nc * 4 * h * w..(nc + 1) * 4 * h * w];
            let d = &mut dx[nc * h * w..(nc + 1) * h * w];
            for y in 0..h {
                for x_ in 0..w {
                    let a = 2 * y * 2 * w + 2 * x_;
                    let b = a + 2 * w;
                    d[y * w + x_] = g[a] + g[a + 1] + g[b] + g[b + 1];
                }
            }
        }
        vec![Some(dx)]
    }
}

impl<T: Float> Tape<T> {
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = max_pool2d_forward(self.value(x))?;
        self.record("max_pool2d", out, vec![x], PoolRule { argmax })
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let out = upsample_nearest2x_forward(self.value(x));
        self.record("upsample_nearest2x", out, vec![x], UpsampleRule)
    }
}

#[cfg(test)]
fn avg_pool2x<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (ho, wo) = (s.h() / 2, s.w() / 2);
    let mut out = Tensor::zeros(Shape::new(s.n(), s.c(), ho, wo));
    let quarter = T::from_f64(0.25);
    for n in 0..s.n() {
        for c in 0..s.c() {
            for y in 0..ho {
                for x_ in 0..wo {
                    let v = x.at(n, c, 2 * y, 2 * x_)
                        + x.at(n, c, 2 * y, 2 * x_ + 1)
                        + x.at(n, c, 2 * y + 1, 2 * x_)
                        + x.at(n, c, 2 * y + 1, 2 * x_ + 1);
                    out.set(n, c, y, x_, v * quarter);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_window_picks_max() {
        let x = Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = max_pool2d_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn constant_input_routes_to_first_element() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 1, 4, 4), 0.5), true);
        let y = tape.max_pool2d(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.5));
        let g = tape.backward_with(y, vec![1.0; 4]).unwrap();
        let dx = g.get(x).unwrap();
        let nonzero: Vec<usize> = dx.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect();
        assert_eq!(nonzero, vec![0, 2, 8, 10]);
    }

    #[test]
    fn odd_height_rejected() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 3, 4));
        assert!(matches!(
            max_pool2d_forward(&x),
            Err(Error::Dimension { axis: "height", .. })
        ));
    }

    #[test]
    fn upsample_single_value() {
        let x = Tensor::<f32>::full(Shape::new(1, 1, 1, 1), 7.0);
        let y = upsample_nearest2x_forward(&x);
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert!(y.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn downsample_of_upsample_of_constant_is_identity() {
        let x = Tensor::<f64>::full(Shape::new(2, 3, 4, 4), -1.25);
        assert_eq!(avg_pool2x(&upsample_nearest2x_forward(&x)), x);
        let (p, _) = max_pool2d_forward(&upsample_nearest2x_forward(&x)).unwrap();
        assert_eq!(p, x);
    }
}
