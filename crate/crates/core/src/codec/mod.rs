//! Landmark sets, Gaussian heatmap rendering and argmax decoding.
//!
//! Pixel centres sit at integer coordinates in both frames. With a stride
//! `r` between image and heatmap, image coordinate `x` maps to heatmap
//! coordinate `(x + 0.5) / r - 0.5`, so both grids cover the same area.

pub mod pts;

use serde::{Deserialize, Serialize};

use crate::engine::{Shape, Tensor};

/// `N` points `(x, y)` in image pixels with per-point visibility.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        let visible = vec![true; points.len()];
        LandmarkSet { points, visible }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned box `(min_x, min_y, max_x, max_y)` over visible points.
    pub fn bbox(&self) -> Option<[f64; 4]> {
        let mut it = self.points.iter().zip(&self.visible).filter(|(_, v)| **v).map(|(p, _)| p);
        let first = it.next()?;
        let mut b = [first[0], first[1], first[0], first[1]];
        for p in it {
            b[0] = b[0].min(p[0]);
            b[1] = b[1].min(p[1]);
            b[2] = b[2].max(p[0]);
            b[3] = b[3].max(p[1]);
        }
        Some(b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Heatmap side length.
    pub size: usize,
    /// Image pixels per heatmap pixel.
    pub stride: usize,
    pub sigma: f64,
    /// Truncation half-width in multiples of `sigma`.
    pub truncate: f64,
    /// Peaks below this value decode as invisible.
    pub threshold: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            size: 64,
            stride: 2,
            sigma: 1.0,
            truncate: 3.0,
            threshold: 0.01,
        }
    }
}

impl CodecConfig {
    pub fn to_heatmap(&self, v: f64) -> f64 {
        (v + 0.5) / self.stride as f64 - 0.5
    }

    pub fn to_image(&self, v: f64) -> f64 {
        (v + 0.5) * self.stride as f64 - 0.5
    }
}

/// Renders one channel into `plane` (`size * size`, zeroed by the caller).
fn render_point(cfg: &CodecConfig, p: [f64; 2], plane: &mut [f32]) {
    let s = cfg.size as i64;
    let cx = cfg.to_heatmap(p[0]).round();
    let cy = cfg.to_heatmap(p[1]).round();
    if !cx.is_finite() || !cy.is_finite() {
        return;
    }
    let (cx, cy) = (cx as i64, cy as i64);
    let r = (cfg.truncate * cfg.sigma).floor() as i64;
    let two_s2 = 2.0 * cfg.sigma * cfg.sigma;
    for y in (cy - r).max(0)..=(cy + r).min(s - 1) {
        for x in (cx - r).max(0)..=(cx + r).min(s - 1) {
            let d2 = ((x - cx).pow(2) + (y - cy).pow(2)) as f64;
            plane[(y * s + x) as usize] = (-d2 / two_s2).exp() as f32;
        }
    }
}

/// Ground-truth maps, shape `(1, N, size, size)`. Invisible landmarks give
/// all-zero channels.
pub fn render_heatmaps(cfg: &CodecConfig, lms: &LandmarkSet) -> Tensor<f32> {
    let mut t = Tensor::zeros(Shape::new(1, lms.len(), cfg.size, cfg.size));
    for (c, (p, &vis)) in lms.points.iter().zip(&lms.visible).enumerate() {
        if vis {
            render_point(cfg, *p, t.plane_mut(0, c));
        }
    }
    t
}

/// Decodes sample `n` of a heatmap batch.
pub fn decode_landmarks(cfg: &CodecConfig, h: &Tensor<f32>, n: usize) -> LandmarkSet {
    let s = h.shape();
    let (hh, ww) = (s.h(), s.w());
    let mut points = Vec::with_capacity(s.c());
    let mut visible = Vec::with_capacity(s.c());
    for c in 0..s.c() {
        let plane = h.plane(n, c);
        let mut best = 0;
        for (i, &v) in plane.iter().enumerate() {
            if v > plane[best] {
                best = i;
            }
        }
        let (py, px) = (best / ww, best % ww);
        let shift = |lo: Option<f32>, hi: Option<f32>| match (lo, hi) {
            (Some(a), Some(b)) if b > a => 0.25,
            (Some(a), Some(b)) if a > b => -0.25,
            _ => 0.0,
        };
        let at = |y: usize, x: usize| plane[y * ww + x];
        let dx = shift(
            px.checked_sub(1).map(|x| at(py, x)),
            (px + 1 < ww).then(|| at(py, px + 1)),
        );
        let dy = shift(
            py.checked_sub(1).map(|y| at(y, px)),
            (py + 1 < hh).then(|| at(py + 1, px)),
        );
        points.push([cfg.to_image(px as f64 + dx), cfg.to_image(py as f64 + dy)]);
        visible.push(plane[best] as f64 >= cfg.threshold);
    }
    LandmarkSet { points, visible }
}

/// Mean over visible ground-truth points of the per-coordinate absolute
/// error, and its maximum.
pub fn coordinate_error(pred: &LandmarkSet, gt: &LandmarkSet) -> (f64, f64) {
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    let mut count = 0usize;
    for ((p, g), &v) in pred.points.iter().zip(&gt.points).zip(&gt.visible) {
        if !v {
            continue;
        }
        for k in 0..2 {
            let e = (p[k] - g[k]).abs();
            sum += e;
            max = max.max(e);
            count += 1;
        }
    }
    (if count == 0 { 0.0 } else { sum / count as f64 }, max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centre_landmark_peaks_at_grid_centre() {
        let cfg = CodecConfig::default();
        let h = render_heatmaps(&cfg, &LandmarkSet::new(vec![[64.0, 64.0]]));
        assert_eq!(h.at(0, 0, 32, 32), 1.0);
        let n = (-0.5f64).exp() as f32;
        for (y, x) in [(31, 32), (33, 32), (32, 31), (32, 33)] {
            assert_eq!(h.at(0, 0, y, x), n);
        }
    }

    #[test]
    fn invisible_landmark_renders_zero_channel_and_decodes_invisible() {
        let cfg = CodecConfig::default();
        let mut lms = LandmarkSet::new(vec![[10.0, 20.0], [50.0, 60.0]]);
        lms.visible[1] = false;
        let h = render_heatmaps(&cfg, &lms);
        assert!(h.plane(0, 1).iter().all(|&v| v == 0.0));
        let d = decode_landmarks(&cfg, &h, 0);
        assert_eq!(d.visible, vec![true, false]);
    }

    #[test]
    fn rendered_mass_matches_direct_sum() {
        let cfg = CodecConfig::default();
        let h = render_heatmaps(&cfg, &LandmarkSet::new(vec![[70.3, 40.9]]));
        let mut mass = 0.0f64;
        for dy in -3i32..=3 {
            for dx in -3i32..=3 {
                mass += ((-(dx * dx + dy * dy) as f64) / 2.0).exp() as f32 as f64;
            }
        }
        assert!((h.sum() - mass).abs() < 1e-6);
    }

    #[test]
    fn frames_are_inverse() {
        let cfg = CodecConfig::default();
        for v in [-3.0, 0.0, 17.25, 127.0] {
            assert!((cfg.to_image(cfg.to_heatmap(v)) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_shifts_toward_larger_neighbour() {
        let cfg = CodecConfig::default();
        let mut h = Tensor::<f32>::zeros(Shape::new(1, 1, 64, 64));
        h.set(0, 0, 10, 20, 1.0);
        h.set(0, 0, 10, 21, 0.5);
        h.set(0, 0, 10, 19, 0.2);
        h.set(0, 0, 9, 20, 0.3);
        let d = decode_landmarks(&cfg, &h, 0);
        assert_eq!(d.points[0], [cfg.to_image(20.25), cfg.to_image(9.75)]);
    }

    #[test]
    fn bbox_skips_invisible_points() {
        let mut l = LandmarkSet::new(vec![[1.0, 5.0], [3.0, 2.0], [100.0, 100.0]]);
        l.visible[2] = false;
        assert_eq!(l.bbox(), Some([1.0, 2.0, 3.0, 5.0]));
    }
}
