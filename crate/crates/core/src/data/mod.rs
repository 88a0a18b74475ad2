//! Training samples: a procedural face generator, `.pts` dataset loading
//! with bounding-box cropping, and random augmentation.

mod io;
mod synth;

pub use io::{
    crop_to_box, load_image, load_manifest, load_pts_dataset, save_dataset, save_image, Manifest, ManifestEntry,
    CROP_MARGIN,
};
pub use synth::{generate, generate_one, SynthConfig};

use rand::Rng;

use crate::codec::{render_heatmaps, CodecConfig, LandmarkSet};
use crate::engine::Tensor;
use crate::error::{check_dim, Result};
use crate::transform::{AugmentConfig, TransformSpec};

/// One image of shape `(1, 3, S, S)` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub landmarks: LandmarkSet,
    pub id: String,
}

impl Sample {
    pub fn image_size(&self) -> usize {
        self.image.shape().w()
    }

    /// Ground-truth heatmaps of shape `(1, N, size, size)`.
    pub fn heatmaps(&self, cfg: &CodecConfig) -> Result<Tensor<f32>> {
        check_dim("heatmaps", "image size", cfg.size * cfg.stride, self.image_size())?;
        Ok(render_heatmaps(cfg, &self.landmarks))
    }
}

/// Applies a random transform, returning the transformed sample and the
/// transform that produced it.
pub fn augment<R: Rng + ?Sized>(
    sample: &Sample,
    rng: &mut R,
    cfg: &AugmentConfig,
    flip_pairs: &[usize],
) -> Result<(Sample, TransformSpec)> {
    let t = TransformSpec::sample(rng, cfg, flip_pairs, sample.image_size());
    Ok((apply_transform(sample, &t)?, t))
}

pub fn apply_transform(sample: &Sample, t: &TransformSpec) -> Result<Sample> {
    Ok(Sample {
        image: t.apply_to_image(&sample.image)?,
        landmarks: t.apply_to_landmarks(&sample.landmarks)?,
        id: sample.id.clone(),
    })
}
