//! Procedural face-like images with analytically placed landmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::codec::LandmarkSet;
use crate::engine::{Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// 5 or 68.
    pub n_landmarks: usize,
    pub seed: u64,
    /// Scales the random pose and part-shape variation; 0 gives one fixed face.
    pub shape_jitter: f64,
    /// Standard deviation of additive pixel noise.
    pub texture_noise: f64,
    /// Probability of drawing a random occluding rectangle.
    pub occluder_prob: f64,
    pub image_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_landmarks: 5,
            seed: 0,
            shape_jitter: 1.0,
            texture_noise: 0.03,
            occluder_prob: 0.0,
            image_size: 128,
        }
    }
}

/// Face geometry in a face-local frame: `u` runs left to right and `v`
/// top to bottom, both in units of the head semi-axes.
#[derive(Clone, Copy, Debug)]
struct Face {
    centre: [f64; 2],
    /// Head semi-axes in pixels.
    axes: [f64; 2],
    angle: f64,
    eye_u: f64,
    eye_v: f64,
    eye_r: [f64; 2],
    brow_v: f64,
    nose_v: f64,
    nose_w: f64,
    mouth_v: f64,
    mouth_w: f64,
    mouth_h: f64,
    skin: [f64; 3],
    feature: [f64; 3],
    background: [f64; 3],
}

impl Face {
    fn sample(rng: &mut ChaCha8Rng, size: f64, jitter: f64) -> Face {
        let mut j = |range: f64| if jitter > 0.0 { rng.random_range(-range..=range) * jitter } else { 0.0 };
        let c = (size - 1.0) / 2.0;
        let s = size / 128.0;
        let face = Face {
            centre: [c + j(6.0) * s, c + 4.0 * s + j(6.0) * s],
            axes: [(36.0 + j(4.0)) * s, (46.0 + j(4.0)) * s],
            angle: j(12.0).to_radians(),
            eye_u: 0.40 + j(0.04),
            eye_v: -0.18 + j(0.04),
            eye_r: [0.15 + j(0.02), 0.07 + j(0.02)],
            brow_v: -0.42 + j(0.04),
            nose_v: 0.18 + j(0.04),
            nose_w: 0.14 + j(0.03),
            mouth_v: 0.52 + j(0.04),
            mouth_w: 0.32 + j(0.05),
            mouth_h: 0.07 + j(0.02),
            skin: [0.0; 3],
            feature: [0.0; 3],
            background: [0.0; 3],
        };
        let mut colour = |lo: f64, hi: f64| [0; 3].map(|_: i32| rng.random_range(lo..hi));
        Face {
            skin: colour(0.55, 0.9),
            feature: colour(0.05, 0.3),
            background: colour(0.1, 0.5),
            ..face
        }
    }

    fn image_point(&self, u: f64, v: f64) -> [f64; 2] {
        let (s, c) = self.angle.sin_cos();
        let (x, y) = (u * self.axes[0], v * self.axes[1]);
        [self.centre[0] + c * x - s * y, self.centre[1] + s * x + c * y]
    }

    fn local_point(&self, p: [f64; 2]) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (p[0] - self.centre[0], p[1] - self.centre[1]);
        ((c * dx + s * dy) / self.axes[0], (-s * dx + c * dy) / self.axes[1])
    }

    /// Landmarks in face-local coordinates.
    fn local_landmarks(&self, n: usize) -> Vec<(f64, f64)> {
        let (eu, ev) = (self.eye_u, self.eye_v);
        let (mw, mv, mh) = (self.mouth_w, self.mouth_v, self.mouth_h);
        if n == 5 {
            return vec![(-eu, ev), (eu, ev), (0.0, self.nose_v), (-mw, mv), (mw, mv)];
        }
        let mut p = Vec::with_capacity(68);
        // Jaw: lower contour of the head, image-left to image-right.
        for i in 0..17 {
            let t = std::f64::consts::PI * (1.0 - i as f64 / 16.0);
            p.push((0.95 * t.cos(), 0.15 + 0.8 * t.sin()));
        }
        // Brows: outer to inner on the left, inner to outer on the right.
        for i in 0..5 {
            let u = -(eu + 0.2) + 0.1 * i as f64;
            p.push((u, self.brow_v - 0.05 * (1.0 - ((u + eu) / 0.2).powi(2)).max(0.0)));
        }
        for i in 0..5 {
            let u = (eu - 0.2) + 0.1 * i as f64;
            p.push((u, self.brow_v - 0.05 * (1.0 - ((u - eu) / 0.2).powi(2)).max(0.0)));
        }
        // Nose bridge down to the tip.
        let bridge_top = ev;
        for i in 0..4 {
            p.push((0.0, bridge_top + (self.nose_v - bridge_top) * i as f64 / 3.0));
        }
        // Nostrils left to right.
        for i in 0..5 {
            let u = self.nose_w * (i as f64 - 2.0) / 2.0;
            p.push((u, self.nose_v + 0.06 - 0.03 * (u / self.nose_w).abs()));
        }
        // Eyes: six contour points clockwise from the left corner.
        let eye = |cu: f64, p: &mut Vec<(f64, f64)>| {
            let (ru, rv) = (self.eye_r[0], self.eye_r[1]);
            for a in [180.0f64, 120.0, 60.0, 0.0, -60.0, -120.0] {
                let r = a.to_radians();
                p.push((cu + ru * r.cos(), ev - rv * r.sin()));
            }
        };
        eye(-eu, &mut p);
        eye(eu, &mut p);
        // Outer lip: left corner, upper lip to right corner, lower lip back.
        for i in 0..12 {
            let a = std::f64::consts::PI * (1.0 - i as f64 / 6.0);
            p.push((mw * a.cos(), mv - mh * 1.4 * a.sin()));
        }
        // Inner lip: corners and three points on each lip.
        for i in 0..8 {
            let a = std::f64::consts::PI * (1.0 - i as f64 / 4.0);
            p.push((0.8 * mw * a.cos(), mv - mh * 0.6 * a.sin()));
        }
        p
    }

    /// Pixel colour at `p`.
    fn shade(&self, p: [f64; 2]) -> [f64; 3] {
        let (u, v) = self.local_point(p);
        let mut c = self.background;
        // Soft edges over about one pixel.
        let edge = 1.0 / self.axes[0].min(self.axes[1]);
        let blend = |c: &mut [f64; 3], target: [f64; 3], signed: f64| {
            let a = (0.5 - signed / edge).clamp(0.0, 1.0);
            for k in 0..3 {
                c[k] = c[k] * (1.0 - a) + target[k] * a;
            }
        };
        blend(&mut c, self.skin, (u * u + v * v).sqrt() - 1.0);
        let (ru, rv) = (self.eye_r[0], self.eye_r[1]);
        for side in [-1.0, 1.0] {
            let du = (u - side * self.eye_u) / ru;
            let dv = (v - self.eye_v) / rv;
            blend(&mut c, self.feature, ((du * du + dv * dv).sqrt() - 1.0) * rv);
            let bu = (u - side * self.eye_u).abs() / 0.22;
            let bv = (v - self.brow_v).abs() / 0.025;
            blend(&mut c, self.feature, (bu.max(bv) - 1.0) * 0.025);
        }
        // Nose: triangle from the bridge to the nostrils.
        let t = ((v - self.eye_v) / (self.nose_v + 0.06 - self.eye_v)).clamp(0.0, 1.0);
        let half = self.nose_w * t;
        let inside = if v < self.eye_v || v > self.nose_v + 0.06 {
            0.02
        } else {
            u.abs() - half
        };
        blend(&mut c, self.skin.map(|s| s * 0.7), inside);
        // Mouth bar.
        let mu = (u.abs() / self.mouth_w).max((v - self.mouth_v).abs() / self.mouth_h);
        blend(&mut c, self.feature, (mu - 1.0) * self.mouth_h);
        c
    }
}

/// Renders `n` samples. Sample `i` draws from its own random stream, so a
/// prefix of a larger dataset equals the smaller dataset.
pub fn generate(cfg: &SynthConfig, n: usize) -> Result<Vec<Sample>> {
    if cfg.n_landmarks != 5 && cfg.n_landmarks != 68 {
        return Err(Error::config(format!("synthetic faces have 5 or 68 landmarks, not {}", cfg.n_landmarks)));
    }
    (0..n).map(|i| generate_one(cfg, i)).collect()
}

pub fn generate_one(cfg: &SynthConfig, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let size = cfg.image_size;
    let face = Face::sample(&mut rng, size as f64, cfg.shape_jitter);
    let points: Vec<[f64; 2]> = face
        .local_landmarks(cfg.n_landmarks)
        .into_iter()
        .map(|(u, v)| face.image_point(u, v))
        .collect();

    let mut image = Tensor::<f32>::zeros(Shape::new(1, 3, size, size));
    let noise = Normal::new(0.0, cfg.texture_noise.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
    let occluder = rng.random_bool(cfg.occluder_prob.clamp(0.0, 1.0)).then(|| {
        let w = rng.random_range(0.2..0.45) * size as f64;
        let h = rng.random_range(0.2..0.45) * size as f64;
        let x0 = rng.random_range(0.0..size as f64 - w);
        let y0 = rng.random_range(0.0..size as f64 - h);
        let col = [0; 3].map(|_: i32| rng.random_range(0.0..1.0));
        ([x0, y0, x0 + w, y0 + h], col)
    });
    for y in 0..size {
        for x in 0..size {
            let mut c = face.shade([x as f64, y as f64]);
            if let Some((r, col)) = occluder {
                if (x as f64) >= r[0] && (x as f64) < r[2] && (y as f64) >= r[1] && (y as f64) < r[3] {
                    c = col;
                }
            }
            for (k, v) in c.iter().enumerate() {
                let n = if cfg.texture_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                image.set(0, k, y, x, (v + n).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(Sample {
        image,
        landmarks: LandmarkSet::new(points),
        id: format!("synth_{:05}", index),
    })
}
