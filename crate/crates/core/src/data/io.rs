use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Sample;
use crate::codec::pts::{read_pts, write_pts};
use crate::codec::LandmarkSet;
use crate::engine::{Shape, Tensor};
use crate::error::{Error, Result};

/// Fraction of the landmark box added on each side before cropping.
pub const CROP_MARGIN: f64 = 0.25;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Reads an image as `(1, 3, H, W)` RGB in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for k in 0..3 {
            t.set(0, k, y as usize, x as usize, px[k] as f32 / 255.0);
        }
    }
    Ok(t)
}

/// Writes the first sample of a `(N, 3, H, W)` tensor as an 8-bit PNG.
pub fn save_image(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let s = t.shape();
    crate::error::check_dim("save_image", "channels", 3, s.c())?;
    let img = image::RgbImage::from_fn(s.w() as u32, s.h() as u32, |x, y| {
        image::Rgb([0, 1, 2].map(|k| (t.at(0, k, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Crops a square around the landmark box, grown by `margin` of the box
/// extent on each side, and resamples it to `size x size` bilinearly.
pub fn crop_to_box(image: &Tensor<f32>, lms: &LandmarkSet, size: usize, margin: f64) -> Result<(Tensor<f32>, LandmarkSet)> {
    let b = lms
        .bbox()
        .ok_or_else(|| Error::Degenerate("cannot crop around an empty landmark set".into()))?;
    let side = (b[2] - b[0]).max(b[3] - b[1]) * (1.0 + 2.0 * margin);
    if side <= 0.0 {
        return Err(Error::Degenerate("landmark box has zero extent".into()));
    }
    // Work in continuous coordinates where pixel i spans [i, i + 1).
    let left = (b[0] + b[2]) / 2.0 + 0.5 - side / 2.0;
    let top = (b[1] + b[3]) / 2.0 + 0.5 - side / 2.0;
    let scale = size as f64 / side;
    let s = image.shape();
    let mut out = Tensor::zeros(Shape::new(1, s.c(), size, size));
    for y in 0..size {
        let sy = top + (y as f64 + 0.5) / scale - 0.5;
        for x in 0..size {
            let sx = left + (x as f64 + 0.5) / scale - 0.5;
            for c in 0..s.c() {
                out.set(0, c, y, x, bilinear(image.plane(0, c), s.h(), s.w(), sy, sx));
            }
        }
    }
    let points = lms
        .points
        .iter()
        .map(|p| [(p[0] + 0.5 - left) * scale - 0.5, (p[1] + 0.5 - top) * scale - 0.5])
        .collect();
    Ok((
        out,
        LandmarkSet {
            points,
            visible: lms.visible.clone(),
        },
    ))
}

fn bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize] as f64
        }
    };
    let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
        + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0));
    v as f32
}

/// Loads every image in `dir` that has a `.pts` file with the same stem.
/// Images without one are skipped with a warning. Images that are already
/// `size x size` are taken as pre-cropped; others are cropped around their
/// landmarks.
pub fn load_pts_dataset(dir: &Path, size: usize) -> Result<Vec<Sample>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    let mut samples = Vec::with_capacity(paths.len());
    for path in paths {
        let pts = path.with_extension("pts");
        if !pts.exists() {
            log::warn!("skipping {}: no landmark file", path.display());
            continue;
        }
        let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        samples.push(load_sample(&path, &pts, id, size)?);
    }
    Ok(samples)
}

fn load_sample(image: &Path, pts: &Path, id: String, size: usize) -> Result<Sample> {
    let img = load_image(image)?;
    let lms = LandmarkSet::new(read_pts(pts)?);
    let s = img.shape();
    let (image, landmarks) = if s.h() == size && s.w() == size {
        (img, lms)
    } else {
        crop_to_box(&img, &lms, size, CROP_MARGIN)?
    };
    Ok(Sample { image, landmarks, id })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Paths relative to the manifest's directory.
    pub image: String,
    pub pts: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub image_size: usize,
    pub n_landmarks: usize,
    pub samples: Vec<ManifestEntry>,
}

/// Writes `<id>.png` and `<id>.pts` per sample plus `manifest.json`.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let (img, pts) = (format!("{}.png", s.id), format!("{}.pts", s.id));
        save_image(&dir.join(&img), &s.image)?;
        write_pts(&dir.join(&pts), &s.landmarks.points)?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            image: img,
            pts,
        });
    }
    let manifest = Manifest {
        image_size: samples.first().map_or(0, Sample::image_size),
        n_landmarks: samples.first().map_or(0, |s| s.landmarks.len()),
        samples: entries,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads the samples listed in a manifest written by [`save_dataset`].
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    m.samples
        .into_iter()
        .map(|e| {
            let s = load_sample(&dir.join(&e.image), &dir.join(&e.pts), e.id, m.image_size)?;
            if s.landmarks.len() != m.n_landmarks {
                return Err(Error::Integrity(format!(
                    "{}: expected {} landmarks, found {}",
                    e.pts,
                    m.n_landmarks,
                    s.landmarks.len()
                )));
            }
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};

    #[test]
    fn box_centre_maps_to_crop_centre() {
        let img = Tensor::zeros(Shape::new(1, 3, 300, 400));
        let lms = LandmarkSet::new(vec![[100.0, 80.0], [220.0, 200.0], [180.0, 120.0]]);
        let (out, mapped) = crop_to_box(&img, &lms, 128, CROP_MARGIN).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 3, 128, 128));
        let b = mapped.bbox().unwrap();
        let centre = [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0];
        assert!((centre[0] - 64.0).abs() <= 0.5 && (centre[1] - 64.0).abs() <= 0.5, "{centre:?}");
        // The square box spans 1.5x the larger extent.
        assert!(((b[2] - b[0]) - 128.0 / 1.5).abs() < 1e-9);
    }

    #[test]
    fn crop_resamples_content() {
        // On a horizontal ramp every crop pixel reads the ramp at its source x.
        let mut img = Tensor::zeros(Shape::new(1, 3, 200, 200));
        for y in 0..200 {
            for x in 0..200 {
                img.set(0, 0, y, x, x as f32 / 400.0);
            }
        }
        let lms = LandmarkSet::new(vec![[70.0, 90.0], [150.0, 130.0]]);
        let (out, mapped) = crop_to_box(&img, &lms, 128, CROP_MARGIN).unwrap();
        let scale = 128.0 / 120.0;
        for (p, q) in lms.points.iter().zip(&mapped.points) {
            let (x, y) = (q[0].round(), q[1].round());
            let src_x = p[0] + (x - q[0]) / scale;
            assert!((out.at(0, 0, y as usize, x as usize) as f64 - src_x / 400.0).abs() < 1e-5);
        }
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate(&SynthConfig::default(), 3).unwrap();
        save_dataset(dir.path(), &samples).unwrap();
        std::fs::write(dir.path().join("stray.png"), b"not read").unwrap();
        let by_dir = load_pts_dataset(dir.path(), 128).unwrap();
        let by_manifest = load_manifest(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(by_dir.len(), 3);
        assert_eq!(by_dir, by_manifest);
        for (a, b) in samples.iter().zip(&by_dir) {
            assert_eq!(a.landmarks, b.landmarks);
            assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn malformed_pts_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate(&SynthConfig::default(), 1).unwrap();
        save_dataset(dir.path(), &samples).unwrap();
        std::fs::write(dir.path().join("synth_00000.pts"), "version: 1\nn_points: 5\n{\n1 2\n}\n").unwrap();
        assert!(matches!(load_pts_dataset(dir.path(), 128), Err(Error::Parse { .. })));
    }
}
