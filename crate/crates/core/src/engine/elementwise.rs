//! Pointwise activations and channel-axis plumbing.

use super::tape::{Backward, Tape, Var};
use super::{Float, Tensor};
use crate::error::{check_dim, Error, Result};

#[inline]
pub fn sigmoid<T: Float>(v: T) -> T {
    // Split on sign so exp never overflows.
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

struct ReluRule;

impl<T: Float> Backward<T> for ReluRule {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T], _wants: &[bool]) -> Vec<Option<Vec<T>>> {
        let dx = inputs[0]
            .data()
            .iter()
            .zip(grad)
            .map(|(&x, &g)| if x > T::ZERO { g } else { T::ZERO })
            .collect();
        vec![Some(dx)]
    }
}

struct SigmoidRule;

impl<T: Float> Backward<T> for SigmoidRule {
    fn backward(&self, _inputs: &[&Tensor<T>], out: &Tensor<T>, grad: &[T], _wants: &[bool]) -> Vec<Option<Vec<T>>> {
        let dx = out
            .data()
            .iter()
            .zip(grad)
            .map(|(&s, &g)| g * s * (T::ONE - s))
            .collect();
        vec![Some(dx)]
    }
}

struct AddRule;

impl<T: Float> Backward<T> for AddRule {
    fn backward(&self, _inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T], wants: &[bool]) -> Vec<Option<Vec<T>>> {
        wants.iter().map(|&w| w.then(|| grad.to_vec())).collect()
    }
}

struct SubRule;

impl<T: Float> Backward<T> for SubRule {
    fn backward(&self, _inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T], wants: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![
            wants[0].then(|| grad.to_vec()),
            wants[1].then(|| grad.iter().map(|&g| -g).collect()),
        ]
    }
}

struct ScaleRule<T>(T);

impl<T: Float> Backward<T> for ScaleRule<T> {
    fn backward(&self, _inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T], _wants: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.iter().map(|&g| g * self.0).collect())]
    }
}

struct ConcatRule;

impl<T: Float> Backward<T> for ConcatRule {
    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, grad: &[T], wants: &[bool]) -> Vec<Option<Vec<T>>> {
        let os = out.shape();
        let plane = os.plane();
        let mut res = Vec::with_capacity(inputs.len());
        let mut c0 = 0;
        for (inp, &want) in inputs.iter().zip(wants) {
            let c = inp.shape().c();
            if want {
                let mut d = Vec::with_capacity(inp.numel());
                for n in 0..os.n() {
                    let off = (n * os.c() + c0) * plane;
                    d.extend_from_slice(&grad[off..off + c * plane]);
                }
                res.push(Some(d));
            } else {
                res.push(None);
            }
            c0 += c;
        }
        res
    }
}

struct ReplicateRule {
    factor: usize,
}

impl<T: Float> Backward<T> for ReplicateRule {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T], _wants: &[bool]) -> Vec<Option<Vec<T>>> {
        let s = inputs[0].shape();
        let len = s.sample();
        let mut dx = vec![T::ZERO; s.numel()];
        for n in 0..s.n() {
            let d = &mut dx[n * len..(n + 1) * len];
            for r in 0..self.factor {
                let off = (n * self.factor + r) * len;
                for (a, &b) in d.iter_mut().zip(&grad[off..off + len]) {
                    *a += b;
                }
            }
        }
        vec![Some(dx)]
    }
}

pub fn concat_channels_forward<T: Float>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::config("concat_channels of an empty list"))?
        .shape();
    let mut c_total = 0;
    for p in parts {
        let s = p.shape();
        check_dim("concat_channels", "batch", first.n(), s.n())?;
        check_dim("concat_channels", "height", first.h(), s.h())?;
        check_dim("concat_channels", "width", first.w(), s.w())?;
        c_total += s.c();
    }
    let os = first.with_c(c_total);
    let mut data = Vec::with_capacity(os.numel());
    for n in 0..first.n() {
        for p in parts {
            data.extend_from_slice(p.sample(n));
        }
    }
    Tensor::from_vec(os, data)
}

/// Tiles the channel axis `factor` times: output channel `r*C + i` equals
/// input channel `i`.
pub fn replicate_channels_forward<T: Float>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::config("replicate_channels: factor must be positive"));
    }
    let s = x.shape();
    let mut data = Vec::with_capacity(s.numel() * factor);
    for n in 0..s.n() {
        for _ in 0..factor {
            data.extend_from_slice(x.sample(n));
        }
    }
    Tensor::from_vec(s.with_c(s.c() * factor), data)
}

impl<T: Float> Tape<T> {
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::ZERO { v } else { T::ZERO });
        self.record("relu", out, vec![x], ReluRule)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.record("sigmoid", out, vec![x], SigmoidRule)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        self.record("add", out, vec![a, b], AddRule)
    }

    /// Sum of any number of equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::config("add_n of an empty list"))?;
        if xs.len() == 1 {
            return Ok(first);
        }
        let v0 = self.value(first);
        let mut acc = v0.data().to_vec();
        for &x in &xs[1..] {
            let v = self.value(x);
            same_shape("add", v0, v)?;
            acc.iter_mut().zip(v.data()).for_each(|(a, &b)| *a += b);
        }
        let out = Tensor::from_vec(v0.shape(), acc)?;
        self.record("add", out, xs.to_vec(), AddRule)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| p - q).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        self.record("sub", out, vec![a, b], SubRule)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let k = T::from_f64(k);
        let out = self.value(x).map(|v| v * k);
        self.record("scale", out, vec![x], ScaleRule(k))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = concat_channels_forward(&parts)?;
        self.record("concat_channels", out, xs.to_vec(), ConcatRule)
    }

    pub fn replicate_channels(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = replicate_channels_forward(self.value(x), factor)?;
        self.record("replicate_channels", out, vec![x], ReplicateRule { factor })
    }
}

pub(crate) fn same_shape<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    for (i, axis) in ["batch", "channels", "height", "width"].into_iter().enumerate() {
        check_dim(op, axis, sa.0[i], sb.0[i])?;
    }
    Ok(())
}
