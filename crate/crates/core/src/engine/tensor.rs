use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Float;
use crate::error::{Error, Result};

/// NCHW extents of a rank-4 tensor.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.0[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.0[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.0[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.0[3]
    }

    /// Elements in one `H x W` plane.
    #[inline]
    pub fn plane(&self) -> usize {
        self.h() * self.w()
    }

    /// Elements in one sample (`C x H x W`).
    #[inline]
    pub fn sample(&self) -> usize {
        self.c() * self.plane()
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn with_n(self, n: usize) -> Self {
        Shape([n, self.c(), self.h(), self.w()])
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape([self.n(), c, self.h(), self.w()])
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Shape([self.n(), self.c(), h, w])
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n}, {c}, {h}, {w})")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Dense row-major NCHW array with an optional gradient buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Float> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl<T: Float> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::ZERO; shape.numel()],
            grad: None,
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Dimension {
                op: "tensor",
                axis: "numel",
                expected: shape.numel(),
                found: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::from_f64(rng.random_range(lo..hi)))
            .collect();
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: Shape::new(1, 1, 1, 1),
            data: vec![v],
            grad: None,
        }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut Vec<T> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::ZERO; n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::ZERO);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::Dimension {
                op: "accumulate_grad",
                axis: "numel",
                expected: self.data.len(),
                found: delta.len(),
            });
        }
        let g = self.grad_mut();
        for (a, b) in g.iter_mut().zip(delta) {
            *a += *b;
        }
        Ok(())
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                axis: "numel",
                expected: self.shape.numel(),
                found: shape.numel(),
            });
        }
        Ok(Tensor { shape, ..self })
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let s = self.shape;
        self.data[((n * s.c() + c) * s.h() + y) * s.w() + x]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let s = self.shape;
        self.data[((n * s.c() + c) * s.h() + y) * s.w() + x] = v;
    }

    /// One `C x H x W` sample as a slice.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape.sample();
        &self.data[n * len..(n + 1) * len]
    }

    /// One `H x W` plane as a slice.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let len = self.shape.plane();
        let off = (n * self.shape.c() + c) * len;
        &self.data[off..off + len]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let len = self.shape.plane();
        let off = (n * self.shape.c() + c) * len;
        &mut self.data[off..off + len]
    }

    /// Extracts samples `[start, start + count)` along the batch axis.
    pub fn narrow_batch(&self, start: usize, count: usize) -> Result<Self> {
        if start + count > self.shape.n() {
            return Err(Error::Dimension {
                op: "narrow_batch",
                axis: "batch",
                expected: self.shape.n(),
                found: start + count,
            });
        }
        let len = self.shape.sample();
        Ok(Tensor {
            shape: self.shape.with_n(count),
            data: self.data[start * len..(start + count) * len].to_vec(),
            grad: None,
        })
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack_batch(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("stack_batch of an empty list"))?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            for (axis, i) in [("channels", 1), ("height", 2), ("width", 3)] {
                if p.shape.0[i] != first.shape.0[i] {
                    return Err(Error::Dimension {
                        op: "stack_batch",
                        axis,
                        expected: first.shape.0[i],
                        found: p.shape.0[i],
                    });
                }
            }
            n += p.shape.n();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: first.shape.with_n(n),
            data,
            grad: None,
        })
    }

    pub fn all_finite(&self) -> bool {
        all_finite(&self.data)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64(v.to_f64())).collect()),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }
}

/// Branch-free finiteness test: `x * 0` is NaN exactly when `x` is not
/// finite, and eight independent lanes let the loop vectorise.
pub(crate) fn all_finite<T: Float>(xs: &[T]) -> bool {
    let mut lanes = [T::ZERO; 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for (l, &v) in lanes.iter_mut().zip(c) {
            *l += v * T::ZERO;
        }
    }
    lanes.iter().all(|l| *l == T::ZERO) && chunks.remainder().iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finiteness_check_finds_every_position() {
        for len in [0, 3, 8, 17] {
            let xs = vec![1.5f32; len];
            assert!(all_finite(&xs));
            for bad in [f32::NAN, f32::INFINITY, f32::NEG_INFINITY] {
                for i in 0..len {
                    let mut ys = xs.clone();
                    ys[i] = bad;
                    assert!(!all_finite(&ys), "{len} {i} {bad}");
                }
            }
        }
    }

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::<f32>::from_vec(Shape::new(1, 2, 2, 2), vec![0.0; 7]).unwrap_err();
        assert!(matches!(err, Error::Dimension { axis: "numel", .. }));
    }

    #[test]
    fn grad_shares_shape_with_data() {
        let mut t = Tensor::<f64>::zeros(Shape::new(2, 3, 4, 5));
        t.accumulate_grad(&vec![1.0; 120]).unwrap();
        assert_eq!(t.grad().unwrap().len(), t.numel());
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }

    #[test]
    fn indexing_is_row_major_nchw() {
        let t = Tensor::<f32>::from_vec(Shape::new(1, 2, 2, 3), (0..12).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.at(0, 1, 1, 2), 11.0);
        assert_eq!(t.at(0, 0, 1, 0), 3.0);
        assert_eq!(t.plane(0, 1), &[6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
    }
}
