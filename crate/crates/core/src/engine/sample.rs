//! Bilinear sampling with zero fill outside the plane.

use super::Float;

/// A fractional sampling location split into its top-left integer corner
/// and interpolation weights.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<T> {
    pub y0: isize,
    pub x0: isize,
    pub ly: T,
    pub lx: T,
}

impl<T: Float> Tap<T> {
    #[inline]
    pub fn at(y: T, x: T) -> Self {
        let yf = y.floor();
        let xf = x.floor();
        Tap {
            y0: yf.to_f64() as isize,
            x0: xf.to_f64() as isize,
            ly: y - yf,
            lx: x - xf,
        }
    }

    /// Same as [`Tap::at`] for coordinates computed in double precision.
    #[inline]
    pub fn at_f64(y: f64, x: f64) -> Self {
        let yf = y.floor();
        let xf = x.floor();
        Tap {
            y0: yf as isize,
            x0: xf as isize,
            ly: T::from_f64(y - yf),
            lx: T::from_f64(x - xf),
        }
    }

    /// True when no corner touches the plane.
    #[inline]
    pub fn outside(&self, h: usize, w: usize) -> bool {
        self.y0 + 1 < 0 || self.x0 + 1 < 0 || self.y0 >= h as isize || self.x0 >= w as isize
    }

    /// The four corners `(index, weight)`; out-of-plane corners get `None`.
    #[inline]
    pub fn corners(&self, h: usize, w: usize) -> [Option<(usize, T)>; 4] {
        let one = T::ONE;
        let (ly, lx) = (self.ly, self.lx);
        let pick = |yy: isize, xx: isize, wt: T| {
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                Some((yy as usize * w + xx as usize, wt))
            } else {
                None
            }
        };
        [
            pick(self.y0, self.x0, (one - ly) * (one - lx)),
            pick(self.y0, self.x0 + 1, (one - ly) * lx),
            pick(self.y0 + 1, self.x0, ly * (one - lx)),
            pick(self.y0 + 1, self.x0 + 1, ly * lx),
        ]
    }

    #[inline]
    pub fn sample(&self, plane: &[T], h: usize, w: usize) -> T {
        if self.outside(h, w) {
            return T::ZERO;
        }
        let mut acc = T::ZERO;
        for (idx, wt) in self.corners(h, w).into_iter().flatten() {
            acc += wt * plane[idx];
        }
        acc
    }

    #[inline]
    pub fn scatter(&self, plane: &mut [T], h: usize, w: usize, g: T) {
        if self.outside(h, w) {
            return;
        }
        for (idx, wt) in self.corners(h, w).into_iter().flatten() {
            plane[idx] += wt * g;
        }
    }

    /// Partial derivatives `(d/dy, d/dx)` of the sampled value with respect
    /// to the fractional location.
    #[inline]
    pub fn location_grad(&self, plane: &[T], h: usize, w: usize) -> (T, T) {
        if self.outside(h, w) {
            return (T::ZERO, T::ZERO);
        }
        let get = |yy: isize, xx: isize| {
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                plane[yy as usize * w + xx as usize]
            } else {
                T::ZERO
            }
        };
        let v00 = get(self.y0, self.x0);
        let v01 = get(self.y0, self.x0 + 1);
        let v10 = get(self.y0 + 1, self.x0);
        let v11 = get(self.y0 + 1, self.x0 + 1);
        let one = T::ONE;
        let dy = (one - self.lx) * (v10 - v00) + self.lx * (v11 - v01);
        let dx = (one - self.ly) * (v01 - v00) + self.ly * (v11 - v10);
        (dy, dx)
    }
}
