//! Standard and grouped 2-D convolution (im2col + GEMM, with a direct
//! path for depthwise kernels).

use serde::{Deserialize, Serialize};

use super::tape::{Backward, Tape, Var};
use super::{Float, Shape, Tensor};
use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    /// Stride 1, "same" padding for an odd kernel.
    pub fn same(kernel: usize, groups: usize) -> Self {
        ConvGeometry {
            stride: 1,
            padding: (kernel - 1) / 2,
            groups,
        }
    }
}

/// Weights of one convolution: kernel `(out_ch, in_ch / groups, kH, kW)`
/// and one bias per output channel.
#[derive(Clone, Debug)]
pub struct ConvParams<T: Float> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub geometry: ConvGeometry,
}

impl<T: Float> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, geometry: ConvGeometry) -> Result<Self> {
        let p = ConvParams {
            weight,
            bias,
            geometry,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n()
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c() * self.geometry.groups
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape().h(), self.weight.shape().w())
    }

    pub fn validate(&self) -> Result<()> {
        validate_kernel(self.weight.shape(), self.geometry)?;
        check_dim("conv2d", "bias", self.out_channels(), self.bias.numel())
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

pub(crate) fn validate_kernel(ws: Shape, g: ConvGeometry) -> Result<()> {
    if g.groups == 0 || g.stride == 0 {
        return Err(Error::config("conv: groups and stride must be positive"));
    }
    if !ws.n().is_multiple_of(g.groups) {
        return Err(Error::config(format!(
            "conv: groups {} does not divide out_ch {}",
            g.groups,
            ws.n()
        )));
    }
    if ws.h().is_multiple_of(2) || ws.w().is_multiple_of(2) {
        return Err(Error::config(format!(
            "conv: kernel {}x{} must be odd",
            ws.h(),
            ws.w()
        )));
    }
    Ok(())
}

pub fn conv_out_size(size: usize, kernel: usize, g: ConvGeometry) -> usize {
    (size + 2 * g.padding).saturating_sub(kernel) / g.stride + 1
}

/// Output index range `[lo, hi)` whose input coordinate
/// `o * stride + tap - pad` lands inside `[0, size)`.
#[inline]
pub(crate) fn valid_range(out: usize, size: usize, tap: usize, pad: usize, stride: usize) -> (usize, usize) {
    let tap = tap as isize;
    let pad = pad as isize;
    let s = stride as isize;
    // o * s + tap - pad >= 0
    let lo = (pad - tap).max(0);
    let lo = (lo + s - 1) / s;
    // o * s + tap - pad <= size - 1
    let hi_num = size as isize - 1 + pad - tap;
    let hi = if hi_num < 0 { 0 } else { hi_num / s + 1 };
    let lo = (lo as usize).min(out);
    let hi = (hi as usize).min(out);
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Float>(
    x: &[T],
    channels: usize,
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    cols: &mut [T],
) {
    let hw_out = ho * wo;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            let (ylo, yhi) = valid_range(ho, h, i, pad, stride);
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                let (xlo, xhi) = valid_range(wo, w, j, pad, stride);
                dst[..ylo * wo].iter_mut().for_each(|v| *v = T::ZERO);
                dst[yhi * wo..].iter_mut().for_each(|v| *v = T::ZERO);
                for oy in ylo..yhi {
                    let iy = oy * stride + i - pad;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    drow[..xlo].iter_mut().for_each(|v| *v = T::ZERO);
                    drow[xhi..].iter_mut().for_each(|v| *v = T::ZERO);
                    let src = &plane[iy * w..(iy + 1) * w];
                    if stride == 1 {
                        let start = xlo + j - pad;
                        drow[xlo..xhi].copy_from_slice(&src[start..start + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            drow[ox] = src[ox * stride + j - pad];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<T: Float>(
    cols: &[T],
    channels: usize,
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    dx: &mut [T],
) {
    let hw_out = ho * wo;
    for c in 0..channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            let (ylo, yhi) = valid_range(ho, h, i, pad, stride);
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                let (xlo, xhi) = valid_range(wo, w, j, pad, stride);
                for oy in ylo..yhi {
                    let iy = oy * stride + i - pad;
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    let drow = &mut plane[iy * w..(iy + 1) * w];
                    if stride == 1 {
                        let start = xlo + j - pad;
                        for (d, s) in drow[start..start + (xhi - xlo)].iter_mut().zip(&srow[xlo..xhi]) {
                            *d += *s;
                        }
                    } else {
                        for ox in xlo..xhi {
                            drow[ox * stride + j - pad] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_input(op: &'static str, xs: Shape, ws: Shape, g: ConvGeometry) -> Result<()> {
    validate_kernel(ws, g)?;
    check_dim(op, "channels", ws.c() * g.groups, xs.c())?;
    if !xs.c().is_multiple_of(g.groups) {
        return Err(Error::config(format!("{op}: groups {} does not divide in_ch {}", g.groups, xs.c())));
    }
    Ok(())
}

fn is_depthwise(xs: Shape, ws: Shape, g: ConvGeometry) -> bool {
    g.groups == xs.c() && ws.n() == g.groups && ws.c() == 1
}

fn is_pointwise(ws: Shape, g: ConvGeometry) -> bool {
    ws.h() == 1 && ws.w() == 1 && g.stride == 1 && g.padding == 0
}

/// Forward convolution. `bias` may be `None`.
pub fn conv2d_forward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeometry,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    check_conv_input("conv2d", xs, ws, g)?;
    if let Some(b) = bias {
        check_dim("conv2d", "bias", ws.n(), b.numel())?;
    }
    let (kh, kw) = (ws.h(), ws.w());
    let ho = conv_out_size(xs.h(), kh, g);
    let wo = conv_out_size(xs.w(), kw, g);
    let cout = ws.n();
    let os = Shape::new(xs.n(), cout, ho, wo);
    let mut out = Tensor::zeros(os);
    let hw_out = ho * wo;

    if let Some(b) = bias {
        let bd = b.data();
        for n in 0..xs.n() {
            for c in 0..cout {
                out.plane_mut(n, c).iter_mut().for_each(|v| *v = bd[c]);
            }
        }
    }

    if is_depthwise(xs, ws, g) {
        depthwise_forward(x, weight, g, &mut out);
        return Ok(out);
    }

    let cin_g = xs.c() / g.groups;
    let cout_g = cout / g.groups;
    let kdim = cin_g * kh * kw;
    let pointwise = is_pointwise(ws, g);
    let mut cols = if pointwise { Vec::new() } else { vec![T::ZERO; kdim * hw_out] };
    let wd = weight.data();
    for n in 0..xs.n() {
        let xsample = x.sample(n);
        for grp in 0..g.groups {
            let xg = &xsample[grp * cin_g * xs.plane()..(grp + 1) * cin_g * xs.plane()];
            let b: &[T] = if pointwise {
                xg
            } else {
                im2col(xg, cin_g, (xs.h(), xs.w()), (kh, kw), g.stride, g.padding, (ho, wo), &mut cols);
                &cols
            };
            let wg = &wd[grp * cout_g * kdim..(grp + 1) * cout_g * kdim];
            let off = (n * cout + grp * cout_g) * hw_out;
            let og = &mut out.data_mut()[off..off + cout_g * hw_out];
            T::gemm(cout_g, kdim, hw_out, T::ONE, wg, false, b, false, T::ONE, og);
        }
    }
    Ok(out)
}

fn depthwise_forward<T: Float>(x: &Tensor<T>, weight: &Tensor<T>, g: ConvGeometry, out: &mut Tensor<T>) {
    let xs = x.shape();
    let ws = weight.shape();
    let (kh, kw) = (ws.h(), ws.w());
    let os = out.shape();
    let (ho, wo) = (os.h(), os.w());
    let (h, w) = (xs.h(), xs.w());
    let (s, p) = (g.stride, g.padding);
    for n in 0..xs.n() {
        for c in 0..xs.c() {
            let xp = x.plane(n, c);
            let wk = &weight.data()[c * kh * kw..(c + 1) * kh * kw];
            let op = out.plane_mut(n, c);
            for i in 0..kh {
                let (ylo, yhi) = valid_range(ho, h, i, p, s);
                for j in 0..kw {
                    let wt = wk[i * kw + j];
                    let (xlo, xhi) = valid_range(wo, w, j, p, s);
                    for oy in ylo..yhi {
                        let iy = oy * s + i - p;
                        let src = &xp[iy * w..(iy + 1) * w];
                        let dst = &mut op[oy * wo..(oy + 1) * wo];
                        if s == 1 {
                            let start = xlo + j - p;
                            for (d, v) in dst[xlo..xhi].iter_mut().zip(&src[start..start + (xhi - xlo)]) {
                                *d += wt * *v;
                            }
                        } else {
                            for ox in xlo..xhi {
                                dst[ox] += wt * src[ox * s + j - p];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `(dx, dweight, dbias)`; `None` where not requested.
pub type ConvGrads<T> = (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>);

/// Gradients of a convolution, each computed only when requested.
pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: ConvGeometry,
    dy: &[T],
    wants: (bool, bool, bool),
) -> ConvGrads<T> {
    let xs = x.shape();
    let ws = weight.shape();
    let (kh, kw) = (ws.h(), ws.w());
    let ho = conv_out_size(xs.h(), kh, g);
    let wo = conv_out_size(xs.w(), kw, g);
    let hw_out = ho * wo;
    let cout = ws.n();

    let db = wants.2.then(|| {
        let mut db = vec![T::ZERO; cout];
        for n in 0..xs.n() {
            for (c, acc) in db.iter_mut().enumerate() {
                let off = (n * cout + c) * hw_out;
                *acc += dy[off..off + hw_out].iter().copied().sum::<T>();
            }
        }
        db
    });

    if is_depthwise(xs, ws, g) {
        let (dx, dw) = depthwise_backward(x, weight, g, dy, (ho, wo), wants);
        return (dx, dw, db);
    }

    let cin_g = xs.c() / g.groups;
    let cout_g = cout / g.groups;
    let kdim = cin_g * kh * kw;
    let pointwise = is_pointwise(ws, g);
    let mut dx = wants.0.then(|| vec![T::ZERO; xs.numel()]);
    let mut dw = wants.1.then(|| vec![T::ZERO; ws.numel()]);
    let mut cols = vec![T::ZERO; if pointwise { 0 } else { kdim * hw_out }];
    let mut dcols = vec![T::ZERO; if pointwise || !wants.0 { 0 } else { kdim * hw_out }];
    let wd = weight.data();
    let plane = xs.plane();
    for n in 0..xs.n() {
        for grp in 0..g.groups {
            let off = (n * cout + grp * cout_g) * hw_out;
            let dyg = &dy[off..off + cout_g * hw_out];
            let xoff = (n * xs.c() + grp * cin_g) * plane;
            if let Some(dw) = dw.as_mut() {
                let xg = &x.data()[xoff..xoff + cin_g * plane];
                let b: &[T] = if pointwise {
                    xg
                } else {
                    im2col(xg, cin_g, (xs.h(), xs.w()), (kh, kw), g.stride, g.padding, (ho, wo), &mut cols);
                    &cols
                };
                let dwg = &mut dw[grp * cout_g * kdim..(grp + 1) * cout_g * kdim];
                T::gemm(cout_g, hw_out, kdim, T::ONE, dyg, false, b, true, T::ONE, dwg);
            }
            if let Some(dx) = dx.as_mut() {
                let wg = &wd[grp * cout_g * kdim..(grp + 1) * cout_g * kdim];
                let dxg = &mut dx[xoff..xoff + cin_g * plane];
                if pointwise {
                    T::gemm(kdim, cout_g, hw_out, T::ONE, wg, true, dyg, false, T::ONE, dxg);
                } else {
                    T::gemm(kdim, cout_g, hw_out, T::ONE, wg, true, dyg, false, T::ZERO, &mut dcols);
                    col2im(&dcols, cin_g, (xs.h(), xs.w()), (kh, kw), g.stride, g.padding, (ho, wo), dxg);
                }
            }
        }
    }
    (dx, dw, db)
}

fn depthwise_backward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: ConvGeometry,
    dy: &[T],
    (ho, wo): (usize, usize),
    wants: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let xs = x.shape();
    let ws = weight.shape();
    let (kh, kw) = (ws.h(), ws.w());
    let (h, w) = (xs.h(), xs.w());
    let (s, p) = (g.stride, g.padding);
    let mut dx = wants.0.then(|| vec![T::ZERO; xs.numel()]);
    let mut dw = wants.1.then(|| vec![T::ZERO; ws.numel()]);
    let hw_out = ho * wo;
    for n in 0..xs.n() {
        for c in 0..xs.c() {
            let xp = x.plane(n, c);
            let off = (n * xs.c() + c) * hw_out;
            let dyp = &dy[off..off + hw_out];
            let wk = &weight.data()[c * kh * kw..(c + 1) * kh * kw];
            for i in 0..kh {
                let (ylo, yhi) = valid_range(ho, h, i, p, s);
                for j in 0..kw {
                    let (xlo, xhi) = valid_range(wo, w, j, p, s);
                    let mut acc = T::ZERO;
                    let wt = wk[i * kw + j];
                    for oy in ylo..yhi {
                        let iy = oy * s + i - p;
                        let drow = &dyp[oy * wo..(oy + 1) * wo];
                        if wants.1 {
                            let src = &xp[iy * w..(iy + 1) * w];
                            if s == 1 {
                                let start = xlo + j - p;
                                acc += dot(&drow[xlo..xhi], &src[start..start + (xhi - xlo)]);
                            } else {
                                for ox in xlo..xhi {
                                    acc += drow[ox] * src[ox * s + j - p];
                                }
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let base = (n * xs.c() + c) * h * w + iy * w;
                            let dst = &mut dx[base..base + w];
                            if s == 1 {
                                let start = xlo + j - p;
                                for (d, v) in dst[start..start + (xhi - xlo)].iter_mut().zip(&drow[xlo..xhi]) {
                                    *d += wt * *v;
                                }
                            } else {
                                for ox in xlo..xhi {
                                    dst[ox * s + j - p] += wt * drow[ox];
                                }
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[(c * kh + i) * kw + j] += acc;
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Dot product over eight independent lanes so the loop vectorises.
fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::ZERO; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| *x * *y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    lanes.iter().copied().sum::<T>() + tail
}

struct ConvRule {
    geometry: ConvGeometry,
    has_bias: bool,
}

impl<T: Float> Backward<T> for ConvRule {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T], wants: &[bool]) -> Vec<Option<Vec<T>>> {
        let want_b = self.has_bias && wants[2];
        let (dx, dw, db) = conv2d_backward(inputs[0], inputs[1], self.geometry, grad, (wants[0], wants[1], want_b));
        let mut v = vec![dx, dw];
        if self.has_bias {
            v.push(db);
        }
        v
    }
}

impl<T: Float> Tape<T> {
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, geometry: ConvGeometry) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(weight), bias.map(|b| self.value(b)), geometry)?;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.record(
            "conv2d",
            out,
            parents,
            ConvRule {
                geometry,
                has_bias: bias.is_some(),
            },
        )
    }

    /// Depthwise `k x k` conv followed by a pointwise `1 x 1` conv.
    pub fn depthwise_separable_conv(
        &mut self,
        x: Var,
        depthwise: (Var, Option<Var>),
        pointwise: (Var, Option<Var>),
        padding: usize,
    ) -> Result<Var> {
        let c = self.value(x).shape().c();
        let dws = self.value(depthwise.0).shape();
        if dws.n() != c || dws.c() != 1 {
            return Err(Error::config(format!(
                "depthwise_separable_conv: depthwise kernel {dws} does not match {c} channels (groups must equal channels)"
            )));
        }
        let pws = self.value(pointwise.0).shape();
        if pws.h() != 1 || pws.w() != 1 {
            return Err(Error::config("depthwise_separable_conv: pointwise kernel must be 1x1"));
        }
        let mid = self.conv2d(
            x,
            depthwise.0,
            depthwise.1,
            ConvGeometry {
                stride: 1,
                padding,
                groups: c,
            },
        )?;
        self.conv2d(mid, pointwise.0, pointwise.1, ConvGeometry::same(1, 1))
    }
}

/// Parameter count of a depthwise-separable conv with biases:
/// `(C*k^2 + C) + (C*C_out + C_out)`.
pub fn separable_param_count(channels: usize, kernel: usize, out: usize) -> usize {
    channels * kernel * kernel + channels + channels * out + out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], g: ConvGeometry) -> Tensor<f64> {
        let xs = x.shape();
        let ws = w.shape();
        let ho = conv_out_size(xs.h(), ws.h(), g);
        let wo = conv_out_size(xs.w(), ws.w(), g);
        let cin_g = xs.c() / g.groups;
        let cout_g = ws.n() / g.groups;
        let mut out = Tensor::zeros(Shape::new(xs.n(), ws.n(), ho, wo));
        for n in 0..xs.n() {
            for co in 0..ws.n() {
                let grp = co / cout_g;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = b[co];
                        for ci in 0..cin_g {
                            for i in 0..ws.h() {
                                for j in 0..ws.w() {
                                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + j) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= xs.h() as isize || ix >= xs.w() as isize {
                                        continue;
                                    }
                                    s += w.at(co, ci, i, j) * x.at(n, grp * cin_g + ci, iy as usize, ix as usize);
                                }
                            }
                        }
                        out.set(n, co, oy, ox, s);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn all_ones_centre_is_nine() {
        let x = Tensor::<f32>::full(Shape::new(1, 1, 3, 3), 1.0);
        let w = Tensor::<f32>::full(Shape::new(1, 1, 3, 3), 1.0);
        let y = conv2d_forward(&x, &w, None, ConvGeometry::same(3, 1)).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn identity_pointwise_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::uniform(Shape::new(2, 1, 5, 4), -1.0, 1.0, &mut rng);
        let w = Tensor::<f32>::full(Shape::new(1, 1, 1, 1), 1.0);
        let b = Tensor::<f32>::zeros(Shape::new(1, 1, 1, 1));
        let y = conv2d_forward(&x, &w, Some(&b), ConvGeometry::same(1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_naive_for_strides_and_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(cin, cout, k, stride, groups) in &[
            (3, 4, 3, 1, 1),
            (4, 6, 3, 2, 2),
            (4, 4, 3, 1, 4),
            (4, 4, 5, 2, 4),
            (2, 3, 1, 1, 1),
            (6, 3, 1, 2, 3),
        ] {
            let g = ConvGeometry {
                stride,
                padding: (k - 1) / 2,
                groups,
            };
            let x = Tensor::<f64>::uniform(Shape::new(2, cin, 7, 6), -1.0, 1.0, &mut rng);
            let w = Tensor::<f64>::uniform(Shape::new(cout, cin / groups, k, k), -1.0, 1.0, &mut rng);
            let b = Tensor::<f64>::uniform(Shape::new(1, cout, 1, 1), -1.0, 1.0, &mut rng);
            let got = conv2d_forward(&x, &w, Some(&b), g).unwrap();
            let want = naive_conv(&x, &w, b.data(), g);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12, "{cin} {cout} {k} {stride} {groups}");
        }
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let w = Tensor::<f32>::zeros(Shape::new(2, 2, 3, 3));
        match conv2d_forward(&x, &w, None, ConvGeometry::same(3, 1)) {
            Err(Error::Dimension { axis, expected, found, .. }) => {
                assert_eq!(axis, "channels");
                assert_eq!((expected, found), (2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 4, 4));
        let w = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        assert!(matches!(
            conv2d_forward(&x, &w, None, ConvGeometry::same(3, 1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn separable_counts() {
        // C=8, k=3, C_out=16: 72 + 128 weights, 8 + 16 biases.
        assert_eq!(separable_param_count(8, 3, 16), 200 + 24);
        assert_eq!(16 * 8 * 9, 1152);
    }

    #[test]
    fn separable_requires_groups_equal_channels() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 4, 5, 5)));
        let dw = tape.constant(Tensor::zeros(Shape::new(4, 2, 3, 3)));
        let pw = tape.constant(Tensor::zeros(Shape::new(8, 4, 1, 1)));
        assert!(matches!(
            tape.depthwise_separable_conv(x, (dw, None), (pw, None), 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn identity_separable_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = 3;
        let xv = Tensor::<f64>::uniform(Shape::new(1, c, 6, 6), -1.0, 1.0, &mut rng);
        let mut dw = Tensor::<f64>::zeros(Shape::new(c, 1, 3, 3));
        for ch in 0..c {
            dw.set(ch, 0, 1, 1, 1.0);
        }
        let mut pw = Tensor::<f64>::zeros(Shape::new(c, c, 1, 1));
        for ch in 0..c {
            pw.set(ch, ch, 0, 0, 1.0);
        }
        let mut tape = Tape::new();
        let x = tape.constant(xv.clone());
        let dwv = tape.constant(dw);
        let pwv = tape.constant(pw);
        let y = tape.depthwise_separable_conv(x, (dwv, None), (pwv, None), 1).unwrap();
        assert_eq!(tape.value(y), &xv);
    }
}
