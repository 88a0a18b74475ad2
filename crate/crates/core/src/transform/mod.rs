//! Affine and flip transforms of images, landmarks and heatmaps, and the
//! transform-coherent training loss.
//!
//! A transform maps a point `p` to `A(flip(p))`, where `flip` mirrors
//! `x -> W - 1 - x` and `A` is a 2x3 affine. Images and heatmaps are warped
//! by inverse mapping with bilinear sampling and zero fill.

mod flip;
mod loss;

pub use flip::{flip_pairs_5, flip_pairs_68, load_flip_pairs, parse_flip_pairs, validate_flip_pairs};
pub use loss::{coherent_loss, LossTerms, LossWeights, PgLoss};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, LandmarkSet};
use crate::engine::warp::warp_forward;
use crate::engine::{SamplingGrid, Tensor};
use crate::error::{check_dim, Error, Result};

/// Row-major 2x3 matrix `[[a, b, tx], [c, d, ty]]`.
pub type Affine = [[f64; 3]; 2];

pub const IDENTITY: Affine = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];

pub fn affine_apply(m: &Affine, p: [f64; 2]) -> [f64; 2] {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2],
    ]
}

pub fn affine_det(m: &Affine) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

pub fn affine_inverse(m: &Affine) -> Result<Affine> {
    let det = affine_det(m);
    if det.abs() <= 1e-6 || !det.is_finite() {
        return Err(Error::Singular { det });
    }
    let (a, b, c, d) = (m[0][0], m[0][1], m[1][0], m[1][1]);
    let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
    Ok([
        [ia, ib, -(ia * m[0][2] + ib * m[1][2])],
        [ic, id, -(ic * m[0][2] + id * m[1][2])],
    ])
}

/// `outer(inner(p))`.
pub fn affine_compose(outer: &Affine, inner: &Affine) -> Affine {
    let mut r = [[0.0; 3]; 2];
    for i in 0..2 {
        for j in 0..3 {
            r[i][j] = outer[i][0] * inner[0][j] + outer[i][1] * inner[1][j];
        }
        r[i][2] += outer[i][2];
    }
    r
}

/// Rotation by `degrees` and isotropic `scale` about `centre`.
pub fn rotation_about(centre: [f64; 2], degrees: f64, scale: f64) -> Affine {
    let (s, c) = degrees.to_radians().sin_cos();
    let (a, b, cc, d) = (scale * c, -scale * s, scale * s, scale * c);
    [
        [a, b, centre[0] - a * centre[0] - b * centre[1]],
        [cc, d, centre[1] - cc * centre[0] - d * centre[1]],
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub affine: Affine,
    pub flip: bool,
    /// Involution over landmark indices used when `flip` is set.
    pub flip_pairs: Vec<usize>,
    /// Side length of the square image frame the transform acts on.
    pub image_size: usize,
}

/// Ranges for random augmentation transforms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub flip_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation_deg: 40.0,
            scale_range: (0.8, 1.2),
            flip_probability: 0.5,
        }
    }
}

impl TransformSpec {
    pub fn identity(n_landmarks: usize, image_size: usize) -> Self {
        TransformSpec {
            affine: IDENTITY,
            flip: false,
            flip_pairs: (0..n_landmarks).collect(),
            image_size,
        }
    }

    pub fn centre(&self) -> [f64; 2] {
        let c = (self.image_size as f64 - 1.0) / 2.0;
        [c, c]
    }

    /// Random rotation, scale and flip about the image centre.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, cfg: &AugmentConfig, flip_pairs: &[usize], image_size: usize) -> Self {
        let deg = rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg);
        let scale = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1);
        let flip = rng.random_bool(cfg.flip_probability);
        let mut t = TransformSpec::identity(flip_pairs.len(), image_size);
        t.affine = rotation_about(t.centre(), deg, scale);
        t.flip = flip;
        t.flip_pairs = flip_pairs.to_vec();
        t
    }

    pub fn validate(&self) -> Result<()> {
        affine_inverse(&self.affine)?;
        validate_flip_pairs(&self.flip_pairs)
    }

    /// Maps a point of the source frame into the transformed frame.
    pub fn map_point(&self, p: [f64; 2]) -> [f64; 2] {
        let q = if self.flip {
            [self.image_size as f64 - 1.0 - p[0], p[1]]
        } else {
            p
        };
        affine_apply(&self.affine, q)
    }

    /// Source location sampled by each output pixel of a frame of side
    /// `size` whose pixel pitch is `stride` image pixels.
    fn source_coords(&self, size: usize, stride: usize) -> Result<Vec<(f64, f64)>> {
        let r = stride as f64;
        // Conjugate the image-frame affine into the target frame.
        let to_img: Affine = [[r, 0.0, 0.5 * r - 0.5], [0.0, r, 0.5 * r - 0.5]];
        let from_img = affine_inverse(&to_img)?;
        let inv = affine_compose(&from_img, &affine_compose(&affine_inverse(&self.affine)?, &to_img));
        let last = size as f64 - 1.0;
        let mut coords = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let mut p = affine_apply(&inv, [x as f64, y as f64]);
                if self.flip {
                    p[0] = last - p[0];
                }
                coords.push((p[1], p[0]));
            }
        }
        Ok(coords)
    }

    /// Sampling grid warping heatmaps of side `cfg.size`, including the
    /// landmark channel permutation under flip.
    pub fn heatmap_grid(&self, cfg: &CodecConfig, batch_index_count: usize) -> Result<SamplingGrid> {
        self.validate()?;
        if cfg.size * cfg.stride != self.image_size {
            return Err(Error::config(format!(
                "heatmap size {} x stride {} does not cover image size {}",
                cfg.size, cfg.stride, self.image_size
            )));
        }
        let coords = self.source_coords(cfg.size, cfg.stride)?;
        let perm = self.channel_sources();
        Ok(SamplingGrid {
            height: cfg.size,
            width: cfg.size,
            coords: vec![coords; batch_index_count],
            source_channel: vec![perm; batch_index_count],
        })
    }

    /// Input channel read by each output channel.
    pub fn channel_sources(&self) -> Vec<usize> {
        if self.flip {
            self.flip_pairs.clone()
        } else {
            (0..self.flip_pairs.len()).collect()
        }
    }

    pub fn apply_to_image(&self, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        affine_inverse(&self.affine)?;
        let s = img.shape();
        check_dim("apply_to_image", "height", self.image_size, s.h())?;
        check_dim("apply_to_image", "width", self.image_size, s.w())?;
        let coords = self.source_coords(self.image_size, 1)?;
        let grid = SamplingGrid {
            height: s.h(),
            width: s.w(),
            coords: vec![coords; s.n()],
            source_channel: vec![(0..s.c()).collect(); s.n()],
        };
        warp_forward(img, &grid)
    }

    pub fn apply_to_landmarks(&self, lms: &LandmarkSet) -> Result<LandmarkSet> {
        check_dim("apply_to_landmarks", "landmarks", self.flip_pairs.len(), lms.len())?;
        let src = self.channel_sources();
        Ok(LandmarkSet {
            points: src.iter().map(|&i| self.map_point(lms.points[i])).collect(),
            visible: src.iter().map(|&i| lms.visible[i]).collect(),
        })
    }

    /// Warps every sample of a heatmap batch with this transform.
    pub fn apply_to_heatmaps(&self, cfg: &CodecConfig, h: &Tensor<f32>) -> Result<Tensor<f32>> {
        check_dim("apply_to_heatmaps", "channels", self.flip_pairs.len(), h.shape().c())?;
        warp_forward(h, &self.heatmap_grid(cfg, h.shape().n())?)
    }
}

/// Stacks per-sample heatmap grids into one batch grid.
pub fn batch_grid(transforms: &[TransformSpec], cfg: &CodecConfig) -> Result<SamplingGrid> {
    let mut grid = SamplingGrid {
        height: cfg.size,
        width: cfg.size,
        coords: Vec::with_capacity(transforms.len()),
        source_channel: Vec::with_capacity(transforms.len()),
    };
    for t in transforms {
        let g = t.heatmap_grid(cfg, 1)?;
        grid.coords.extend(g.coords);
        grid.source_channel.extend(g.source_channel);
    }
    Ok(grid)
}

/// `count` random transforms drawn from ChaCha8 seeded with `seed`, as used
/// by the coherence probe.
pub fn sample_transforms(
    seed: u64,
    count: usize,
    cfg: &AugmentConfig,
    flip_pairs: &[usize],
    image_size: usize,
) -> Vec<TransformSpec> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| TransformSpec::sample(&mut rng, cfg, flip_pairs, image_size))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Shape;

    #[test]
    fn inverse_composes_to_identity() {
        let m = rotation_about([63.5, 63.5], 23.0, 1.1);
        let id = affine_compose(&m, &affine_inverse(&m).unwrap());
        for i in 0..2 {
            for j in 0..3 {
                assert!((id[i][j] - IDENTITY[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_affine_is_rejected() {
        let mut t = TransformSpec::identity(1, 8);
        t.affine = [[1.0, 2.0, 0.0], [0.5, 1.0, 0.0]];
        let img = Tensor::zeros(Shape::new(1, 1, 8, 8));
        assert!(matches!(t.apply_to_image(&img), Err(Error::Singular { .. })));
    }

    #[test]
    fn rotation_by_quarter_turn_matches_hand_oracle() {
        let img = Tensor::<f32>::from_vec(Shape::new(1, 1, 4, 4), (0..16).map(|v| v as f32).collect()).unwrap();
        let mut t = TransformSpec::identity(0, 4);
        t.affine = rotation_about(t.centre(), 90.0, 1.0);
        let out = t.apply_to_image(&img).unwrap();
        #[rustfmt::skip]
        let want = [
            12.0, 8.0, 4.0, 0.0,
            13.0, 9.0, 5.0, 1.0,
            14.0, 10.0, 6.0, 2.0,
            15.0, 11.0, 7.0, 3.0,
        ];
        for (a, b) in out.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-5, "{:?}", out.data());
        }
    }

    #[test]
    fn flip_of_pair_swaps_and_mirrors() {
        let mut t = TransformSpec::identity(2, 128);
        t.flip = true;
        t.flip_pairs = vec![1, 0];
        let l = LandmarkSet::new(vec![[30.0, 10.0], [98.0, 12.0]]);
        let m = t.apply_to_landmarks(&l).unwrap();
        assert_eq!(m.points, vec![[29.0, 12.0], [97.0, 10.0]]);
    }
}
