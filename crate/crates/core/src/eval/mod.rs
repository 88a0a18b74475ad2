//! Landmark error metrics, cumulative error curves and the transform
//! coherence probe.

mod ced;

pub use ced::{ced, CedCurve, DEFAULT_FAILURE_CUTOFF};

use serde::{Deserialize, Serialize};

use crate::codec::{decode_landmarks, CodecConfig, LandmarkSet};
use crate::data::Sample;
use crate::engine::elementwise::sigmoid;
use crate::engine::warp::warp_forward;
use crate::engine::{Tape, Tensor};
use crate::error::{check_dim, Error, Result};
use crate::graph::{run, Mode, ParamStore};
use crate::topology::StackedModel;
use crate::transform::TransformSpec;

/// Face-size normaliser for the mean point error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmeMode {
    /// Distance between the two eye centroids.
    #[serde(alias = "eye-centre", alias = "eye_center")]
    EyeCentre,
    #[serde(alias = "outer-eye-corner")]
    OuterEyeCorner,
    /// Diagonal of the ground-truth landmark box.
    #[serde(alias = "bbox-diagonal")]
    BboxDiagonal,
    /// `sqrt(width * height)` of the ground-truth landmark box.
    #[serde(alias = "bbox-size")]
    BboxSize,
}

impl std::str::FromStr for NmeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::config(format!("unknown NME mode `{s}`")))
    }
}

fn centroid(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len() as f64;
    let (x, y) = points.iter().fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
    [x / n, y / n]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Eye reference points: eye-contour centroids or outer corners for the
/// 68-point markup; the 5-point layout uses its two eye points for both.
fn eye_points(gt: &LandmarkSet, mode: NmeMode) -> Result<([f64; 2], [f64; 2])> {
    let p = &gt.points;
    match (gt.len(), mode) {
        (68, NmeMode::EyeCentre) => Ok((centroid(&p[36..42]), centroid(&p[42..48]))),
        (68, _) => Ok((p[36], p[45])),
        (5, _) => Ok((p[0], p[1])),
        (n, m) => Err(Error::config(format!("{m:?} needs 68 or 5 landmarks, got {n}"))),
    }
}

pub fn normaliser(gt: &LandmarkSet, mode: NmeMode) -> Result<f64> {
    let d = match mode {
        NmeMode::EyeCentre | NmeMode::OuterEyeCorner => {
            let (a, b) = eye_points(gt, mode)?;
            dist(a, b)
        }
        NmeMode::BboxDiagonal | NmeMode::BboxSize => {
            let b = LandmarkSet::new(gt.points.clone())
                .bbox()
                .ok_or_else(|| Error::Degenerate("empty landmark set".into()))?;
            let (w, h) = (b[2] - b[0], b[3] - b[1]);
            if mode == NmeMode::BboxDiagonal {
                w.hypot(h)
            } else {
                (w * h).sqrt()
            }
        }
    };
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::Degenerate(format!("{mode:?} normaliser is {d}")));
    }
    Ok(d)
}

/// Mean Euclidean error over visible ground-truth points divided by the
/// mode's normaliser.
pub fn nme(pred: &LandmarkSet, gt: &LandmarkSet, mode: NmeMode) -> Result<f64> {
    check_dim("nme", "landmarks", gt.len(), pred.len())?;
    let norm = normaliser(gt, mode)?;
    let (sum, count) = pred
        .points
        .iter()
        .zip(&gt.points)
        .zip(&gt.visible)
        .filter(|(_, v)| **v)
        .fold((0.0, 0usize), |(s, c), ((p, g), _)| (s + dist(*p, *g), c + 1));
    if count == 0 {
        return Err(Error::Degenerate("no visible ground-truth landmarks".into()));
    }
    Ok(sum / count as f64 / norm)
}

/// Anything that maps a batch of images to per-landmark heatmaps with
/// values in `[0, 1]`.
pub trait HeatmapModel {
    fn heatmaps(&self, images: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// Inference with a trained stacked model: the last stack's head, passed
/// through a sigmoid, using running batch-norm statistics.
pub struct Predictor<'a> {
    pub model: &'a StackedModel,
    pub params: &'a ParamStore<f32>,
    /// Images per forward pass.
    pub chunk: usize,
}

impl<'a> Predictor<'a> {
    pub fn new(model: &'a StackedModel, params: &'a ParamStore<f32>) -> Self {
        Predictor { model, params, chunk: 8 }
    }
}

impl HeatmapModel for Predictor<'_> {
    fn heatmaps(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let n = images.shape().n();
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let count = self.chunk.max(1).min(n - start);
            let mut tape = Tape::new();
            let x = tape.constant(images.narrow_batch(start, count)?);
            let fwd = run(&self.model.program, self.params, &mut tape, x, Mode::Eval, false)?;
            let last = *fwd.outputs.last().ok_or_else(|| Error::config("model has no outputs"))?;
            parts.push(tape.take_value(last).map(sigmoid));
            start += count;
        }
        Tensor::stack_batch(&parts.iter().collect::<Vec<_>>())
    }
}

fn stack_images(samples: &[Sample]) -> Result<Tensor<f32>> {
    Tensor::stack_batch(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())
}

/// Decoded landmarks for every sample.
pub fn predict(model: &dyn HeatmapModel, samples: &[Sample], codec: &CodecConfig) -> Result<Vec<LandmarkSet>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let h = model.heatmaps(&stack_images(samples)?)?;
    check_dim("predict", "batch", samples.len(), h.shape().n())?;
    Ok((0..samples.len()).map(|i| decode_landmarks(codec, &h, i)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: NmeMode,
    pub mean_nme: f64,
    pub per_sample: Vec<(String, f64)>,
}

pub fn evaluate(model: &dyn HeatmapModel, samples: &[Sample], codec: &CodecConfig, mode: NmeMode) -> Result<EvalReport> {
    let preds = predict(model, samples, codec)?;
    evaluate_predictions(&preds, samples, mode)
}

pub fn evaluate_predictions(preds: &[LandmarkSet], samples: &[Sample], mode: NmeMode) -> Result<EvalReport> {
    check_dim("evaluate", "samples", samples.len(), preds.len())?;
    let per_sample = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| Ok((s.id.clone(), nme(p, &s.landmarks, mode)?)))
        .collect::<Result<Vec<_>>>()?;
    let mean_nme = if per_sample.is_empty() {
        0.0
    } else {
        per_sample.iter().map(|(_, e)| e).sum::<f64>() / per_sample.len() as f64
    };
    Ok(EvalReport {
        mode,
        mean_nme,
        per_sample,
    })
}

/// How far a model is from commuting with image transforms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    /// Mean over samples of `sum((H(T I) - T H(I))^2) / landmarks`.
    pub heatmap: f64,
    /// Mean image-space distance between `decode(H(T I))` and
    /// `T decode(H(I))`, over landmarks found in both and inside the frame.
    pub landmark: f64,
    pub samples: usize,
    pub landmarks_compared: usize,
}

pub fn coherence_probe(
    model: &dyn HeatmapModel,
    samples: &[Sample],
    transforms: &[TransformSpec],
    codec: &CodecConfig,
) -> Result<CoherenceReport> {
    check_dim("coherence_probe", "transforms", samples.len(), transforms.len())?;
    if samples.is_empty() {
        return Err(Error::config("coherence probe needs at least one sample"));
    }
    let mut transformed = Vec::with_capacity(samples.len());
    for (s, t) in samples.iter().zip(transforms) {
        transformed.push(t.apply_to_image(&s.image)?);
    }
    let h = model.heatmaps(&stack_images(samples)?)?;
    let ht = model.heatmaps(&Tensor::stack_batch(&transformed.iter().collect::<Vec<_>>())?)?;
    check_dim("coherence_probe", "batch", samples.len(), ht.shape().n())?;
    let frame = (codec.size * codec.stride) as f64;
    let (mut heat, mut lm, mut count) = (0.0, 0.0, 0usize);
    for (i, t) in transforms.iter().enumerate() {
        let one = h.narrow_batch(i, 1)?;
        let warped = warp_forward(&one, &t.heatmap_grid(codec, 1)?)?;
        let direct = ht.narrow_batch(i, 1)?;
        let sq: f64 = warped
            .data()
            .iter()
            .zip(direct.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        heat += sq / one.shape().c() as f64;

        let mapped = t.apply_to_landmarks(&decode_landmarks(codec, &one, 0))?;
        let found = decode_landmarks(codec, &direct, 0);
        let inside = |p: [f64; 2]| p.iter().all(|v| (-0.5..frame - 0.5).contains(v));
        for c in 0..found.len() {
            if found.visible[c] && mapped.visible[c] && inside(mapped.points[c]) {
                lm += dist(found.points[c], mapped.points[c]);
                count += 1;
            }
        }
    }
    Ok(CoherenceReport {
        heatmap: heat / samples.len() as f64,
        landmark: if count > 0 { lm / count as f64 } else { 0.0 },
        samples: samples.len(),
        landmarks_compared: count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(points: &[[f64; 2]]) -> LandmarkSet {
        LandmarkSet::new(points.to_vec())
    }

    #[test]
    fn constant_offset_gives_closed_form() {
        let gt = set(&[[10.0, 10.0], [30.0, 10.0], [20.0, 20.0], [12.0, 30.0], [28.0, 30.0]]);
        let pred = set(&gt.points.iter().map(|p| [p[0] + 3.0, p[1] - 4.0]).collect::<Vec<_>>());
        assert_eq!(nme(&gt, &gt, NmeMode::EyeCentre).unwrap(), 0.0);
        assert!((nme(&pred, &gt, NmeMode::EyeCentre).unwrap() - 5.0 / 20.0).abs() < 1e-15);
        let diag = 20.0f64.hypot(20.0);
        assert!((nme(&pred, &gt, NmeMode::BboxDiagonal).unwrap() - 5.0 / diag).abs() < 1e-15);
        assert!((nme(&pred, &gt, NmeMode::BboxSize).unwrap() - 5.0 / 20.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_normalisers_error() {
        let gt = set(&[[1.0, 1.0]; 5]);
        for mode in [NmeMode::EyeCentre, NmeMode::BboxDiagonal, NmeMode::BboxSize] {
            assert!(matches!(nme(&gt, &gt, mode), Err(Error::Degenerate(_))));
        }
        assert!(nme(&set(&[[0.0, 0.0], [1.0, 1.0]]), &set(&[[0.0, 0.0], [1.0, 1.0]]), NmeMode::EyeCentre).is_err());
    }

    #[test]
    fn sixty_eight_point_eye_modes() {
        let mut pts = vec![[50.0, 50.0]; 68];
        for i in 36..42 {
            pts[i] = [20.0 + (i - 36) as f64, 40.0];
        }
        for i in 42..48 {
            pts[i] = [60.0 + (i - 42) as f64, 40.0];
        }
        pts[0] = [0.0, 0.0];
        let gt = set(&pts);
        assert!((normaliser(&gt, NmeMode::EyeCentre).unwrap() - 40.0).abs() < 1e-12);
        assert!((normaliser(&gt, NmeMode::OuterEyeCorner).unwrap() - 43.0).abs() < 1e-12);
    }

    #[test]
    fn modes_parse_from_cli_spelling() {
        assert_eq!("bbox-diagonal".parse::<NmeMode>().unwrap(), NmeMode::BboxDiagonal);
        assert_eq!("eye_centre".parse::<NmeMode>().unwrap(), NmeMode::EyeCentre);
        assert!("nose".parse::<NmeMode>().is_err());
    }
}
