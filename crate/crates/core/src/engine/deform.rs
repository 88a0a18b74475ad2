//! Deformable convolution: each kernel tap samples the input bilinearly at
//! its regular grid position displaced by a learned per-pixel offset.
//!
//! Offsets have shape `(N, 2*kH*kW, H_out, W_out)`; channel `2k` holds the
//! vertical and `2k+1` the horizontal displacement (in pixels) of tap
//! `k = i*kW + j`. One offset field is shared by all input channels.

use super::conv::{conv_out_size, validate_kernel, ConvGeometry};
use super::sample::Tap;
use super::tape::{Backward, Tape, Var};
use super::{Float, Shape, Tensor};
use crate::error::{check_dim, Error, Result};

/// Offset tensor paired with a deformable convolution.
#[derive(Clone, Debug)]
pub struct OffsetField<T: Float>(pub Tensor<T>);

impl<T: Float> OffsetField<T> {
    pub fn zeros(batch: usize, kernel: (usize, usize), out_hw: (usize, usize)) -> Self {
        OffsetField(Tensor::zeros(Shape::new(batch, 2 * kernel.0 * kernel.1, out_hw.0, out_hw.1)))
    }
}

fn check_inputs<T: Float>(x: &Tensor<T>, offsets: &Tensor<T>, weight: &Tensor<T>, g: ConvGeometry) -> Result<(usize, usize)> {
    let xs = x.shape();
    let ws = weight.shape();
    validate_kernel(ws, g)?;
    if g.groups != 1 {
        return Err(Error::config("deformable_conv2d: only groups = 1 is supported"));
    }
    check_dim("deformable_conv2d", "channels", ws.c(), xs.c())?;
    let ho = conv_out_size(xs.h(), ws.h(), g);
    let wo = conv_out_size(xs.w(), ws.w(), g);
    let os = offsets.shape();
    check_dim("deformable_conv2d", "offset_batch", xs.n(), os.n())?;
    check_dim("deformable_conv2d", "offset_channels", 2 * ws.h() * ws.w(), os.c())?;
    check_dim("deformable_conv2d", "offset_height", ho, os.h())?;
    check_dim("deformable_conv2d", "offset_width", wo, os.w())?;
    Ok((ho, wo))
}

/// Sampling taps for one sample, indexed `[k * hw_out + pixel]`.
fn plan<T: Float>(offsets: &[T], (kh, kw): (usize, usize), g: ConvGeometry, (ho, wo): (usize, usize)) -> Vec<Tap<T>> {
    let hw = ho * wo;
    let mut taps = Vec::with_capacity(kh * kw * hw);
    for i in 0..kh {
        for j in 0..kw {
            let k = i * kw + j;
            let oy_ch = &offsets[2 * k * hw..(2 * k + 1) * hw];
            let ox_ch = &offsets[(2 * k + 1) * hw..(2 * k + 2) * hw];
            for oy in 0..ho {
                for ox in 0..wo {
                    let p = oy * wo + ox;
                    let by = (oy * g.stride + i) as f64 - g.padding as f64;
                    let bx = (ox * g.stride + j) as f64 - g.padding as f64;
                    taps.push(Tap::at(T::from_f64(by) + oy_ch[p], T::from_f64(bx) + ox_ch[p]));
                }
            }
        }
    }
    taps
}

fn fill_cols<T: Float>(x: &[T], channels: usize, (h, w): (usize, usize), taps: &[Tap<T>], cols: &mut [T]) {
    let plane = h * w;
    for c in 0..channels {
        let xp = &x[c * plane..(c + 1) * plane];
        let dst = &mut cols[c * taps.len()..(c + 1) * taps.len()];
        for (d, t) in dst.iter_mut().zip(taps) {
            *d = t.sample(xp, h, w);
        }
    }
}

pub fn deformable_conv2d_forward<T: Float>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeometry,
) -> Result<Tensor<T>> {
    let (ho, wo) = check_inputs(x, offsets, weight, g)?;
    let xs = x.shape();
    let ws = weight.shape();
    if let Some(b) = bias {
        check_dim("deformable_conv2d", "bias", ws.n(), b.numel())?;
    }
    let cout = ws.n();
    let kk = ws.h() * ws.w();
    let hw = ho * wo;
    let kdim = xs.c() * kk;
    let mut out = Tensor::zeros(Shape::new(xs.n(), cout, ho, wo));
    let mut cols = vec![T::ZERO; kdim * hw];
    for n in 0..xs.n() {
        let taps = plan(offsets.sample(n), (ws.h(), ws.w()), g, (ho, wo));
        fill_cols(x.sample(n), xs.c(), (xs.h(), xs.w()), &taps, &mut cols);
        let od = &mut out.data_mut()[n * cout * hw..(n + 1) * cout * hw];
        if let Some(b) = bias {
            for (c, chunk) in od.chunks_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[c]);
            }
        }
        T::gemm(cout, kdim, hw, T::ONE, weight.data(), false, &cols, false, T::ONE, od);
    }
    Ok(out)
}

/// `(dx, doffsets, dweight, dbias)`.
#[allow(clippy::type_complexity)]
pub fn deformable_conv2d_backward<T: Float>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    weight: &Tensor<T>,
    g: ConvGeometry,
    dy: &[T],
    wants: [bool; 4],
) -> [Option<Vec<T>>; 4] {
    let xs = x.shape();
    let ws = weight.shape();
    let ho = conv_out_size(xs.h(), ws.h(), g);
    let wo = conv_out_size(xs.w(), ws.w(), g);
    let cout = ws.n();
    let kk = ws.h() * ws.w();
    let hw = ho * wo;
    let kdim = xs.c() * kk;
    let (h, w) = (xs.h(), xs.w());
    let plane = h * w;

    let mut dx = wants[0].then(|| vec![T::ZERO; xs.numel()]);
    let mut doff = wants[1].then(|| vec![T::ZERO; offsets.numel()]);
    let mut dw = wants[2].then(|| vec![T::ZERO; ws.numel()]);
    let db = wants[3].then(|| {
        let mut db = vec![T::ZERO; cout];
        for n in 0..xs.n() {
            for (c, acc) in db.iter_mut().enumerate() {
                let off = (n * cout + c) * hw;
                *acc += dy[off..off + hw].iter().copied().sum::<T>();
            }
        }
        db
    });

    let need_cols_grad = wants[0] || wants[1];
    let mut cols = vec![T::ZERO; kdim * hw];
    let mut dcols = vec![T::ZERO; if need_cols_grad { kdim * hw } else { 0 }];
    for n in 0..xs.n() {
        let taps = plan(offsets.sample(n), (ws.h(), ws.w()), g, (ho, wo));
        let dyn_ = &dy[n * cout * hw..(n + 1) * cout * hw];
        let xsample = x.sample(n);
        if let Some(dw) = dw.as_mut() {
            fill_cols(xsample, xs.c(), (h, w), &taps, &mut cols);
            T::gemm(cout, hw, kdim, T::ONE, dyn_, false, &cols, true, T::ONE, dw);
        }
        if !need_cols_grad {
            continue;
        }
        T::gemm(kdim, cout, hw, T::ONE, weight.data(), true, dyn_, false, T::ZERO, &mut dcols);
        for c in 0..xs.c() {
            let dc = &dcols[c * taps.len()..(c + 1) * taps.len()];
            if let Some(dx) = dx.as_mut() {
                let dxp = &mut dx[(n * xs.c() + c) * plane..(n * xs.c() + c + 1) * plane];
                for (t, &gv) in taps.iter().zip(dc) {
                    t.scatter(dxp, h, w, gv);
                }
            }
            if let Some(doff) = doff.as_mut() {
                let xp = &xsample[c * plane..(c + 1) * plane];
                let dos = &mut doff[n * 2 * kk * hw..(n + 1) * 2 * kk * hw];
                for k in 0..kk {
                    for p in 0..hw {
                        let idx = k * hw + p;
                        let gv = dc[idx];
                        let (gy, gx) = taps[idx].location_grad(xp, h, w);
                        dos[2 * k * hw + p] += gv * gy;
                        dos[(2 * k + 1) * hw + p] += gv * gx;
                    }
                }
            }
        }
    }
    [dx, doff, dw, db]
}

struct DeformRule {
    geometry: ConvGeometry,
    has_bias: bool,
}

impl<T: Float> Backward<T> for DeformRule {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T], wants: &[bool]) -> Vec<Option<Vec<T>>> {
        let want_b = self.has_bias && wants[3];
        let [dx, doff, dw, db] = deformable_conv2d_backward(
            inputs[0],
            inputs[1],
            inputs[2],
            self.geometry,
            grad,
            [wants[0], wants[1], wants[2], want_b],
        );
        let mut v = vec![dx, doff, dw];
        if self.has_bias {
            v.push(db);
        }
        v
    }
}

impl<T: Float> Tape<T> {
    pub fn deformable_conv2d(
        &mut self,
        x: Var,
        offsets: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
    ) -> Result<Var> {
        let out = deformable_conv2d_forward(
            self.value(x),
            self.value(offsets),
            self.value(weight),
            bias.map(|b| self.value(b)),
            geometry,
        )?;
        let mut parents = vec![x, offsets, weight];
        parents.extend(bias);
        self.record(
            "deformable_conv2d",
            out,
            parents,
            DeformRule {
                geometry,
                has_bias: bias.is_some(),
            },
        )
    }
}
