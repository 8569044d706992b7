//! Procedural face-like images with identity labels and ground-truth
//! landmarks.
//!
//! Each subject is a parametric drawing (face ellipse, hairline, brow band,
//! eyes, nose ridge, mouth and a smooth skin texture). Samples of the same
//! subject differ only by a small translation, a global brightness offset and
//! Gaussian sensor noise, so within-subject pairs are structurally similar and
//! across-subject pairs are not.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{read_image, write_image, Image, Point, Polygon};
use crate::seed::{self, tag};

pub const MIN_IMAGE_SIZE: usize = 48;
pub const JITTER_TRANSLATION: i32 = 2;
pub const JITTER_BRIGHTNESS: f64 = 10.0;
pub const SENSOR_NOISE_SIGMA: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    fn norm(&self, x: f64, y: f64) -> f64 {
        let u = (x - self.cx) / self.rx;
        let v = (y - self.cy) / self.ry;
        u * u + v * v
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.norm(x, y) <= 1.0
    }
}

/// One sinusoidal component of the subject's skin texture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

/// Geometry and appearance of one synthetic identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectParams {
    pub subject_id: u32,
    pub face_ellipse: Ellipse,
    pub left_eye: (f64, f64),
    pub right_eye: (f64, f64),
    pub eye_radius: (f64, f64),
    pub eye_intensity: f64,
    pub brow_band: (f64, f64),
    pub brow_intensity: f64,
    pub hairline: f64,
    pub hair_intensity: f64,
    pub nose_length: f64,
    pub nose_delta: f64,
    pub mouth_band: (f64, f64),
    pub mouth_half_width: f64,
    pub mouth_intensity: f64,
    pub base_intensity: f64,
    pub background: f64,
    pub texture_seed: u64,
    waves: Vec<Wave>,
}

impl SubjectParams {
    /// Draw the parameters of subject `subject_id` for a square image of
    /// side `size`.
    pub fn sample(subject_id: u32, size: usize, dataset_seed: u64) -> Self {
        let s = size as f64;
        let mut rng = seed::rng(seed::derive(dataset_seed, &[tag::SUBJECT, subject_id as u64]));

        let cx = s / 2.0 + rng.random_range(-0.04..0.04) * s;
        let cy = s / 2.0 + rng.random_range(-0.03..0.05) * s;
        let rx = rng.random_range(0.27..0.38) * s;
        let ry = rng.random_range(0.38..0.46) * s;
        let face = Ellipse { cx, cy, rx, ry };

        let eye_y = cy - rng.random_range(0.06..0.22) * ry - 0.05 * s;
        let half_sep = rng.random_range(0.36..0.58) * rx;
        let eye_tilt = rng.random_range(-0.03..0.03) * s;
        let left_eye = (cx - half_sep, eye_y - eye_tilt);
        let right_eye = (cx + half_sep, eye_y + eye_tilt);
        let eye_radius = (
            rng.random_range(0.05..0.09) * s,
            rng.random_range(0.025..0.05) * s,
        );

        let brow_gap = rng.random_range(0.05..0.10) * s;
        let brow_thick = rng.random_range(0.02..0.06) * s;
        let brow_bottom = eye_y - brow_gap;
        let brow_band = (brow_bottom - brow_thick, brow_bottom);

        let hairline = cy - ry + rng.random_range(0.10..0.30) * ry;
        let nose_length = rng.random_range(0.10..0.20) * s;
        let mouth_y = eye_y + nose_length + rng.random_range(0.08..0.16) * s;
        let mouth_thick = rng.random_range(0.02..0.05) * s;
        let mouth_band = (mouth_y - mouth_thick, mouth_y + mouth_thick);

        let base_intensity = rng.random_range(90.0..180.0);
        let waves = (0..4)
            .map(|_| Wave {
                fx: rng.random_range(-3.0..3.0) / s * std::f64::consts::TAU,
                fy: rng.random_range(-3.0..3.0) / s * std::f64::consts::TAU,
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                amp: rng.random_range(6.0..16.0),
            })
            .collect();

        SubjectParams {
            subject_id,
            face_ellipse: face,
            left_eye,
            right_eye,
            eye_radius,
            eye_intensity: rng.random_range(10.0..60.0),
            brow_band,
            brow_intensity: rng.random_range(20.0..80.0),
            hairline,
            hair_intensity: rng.random_range(15.0..110.0),
            nose_length,
            nose_delta: rng.random_range(-35.0..35.0),
            mouth_band,
            mouth_half_width: rng.random_range(0.35..0.6) * half_sep + 0.05 * s,
            mouth_intensity: rng.random_range(30.0..90.0),
            base_intensity,
            background: rng.random_range(20.0..60.0),
            texture_seed: rng.random(),
            waves,
        }
    }

    fn texture(&self, x: f64, y: f64) -> f64 {
        self.waves
            .iter()
            .map(|w| w.amp * (w.fx * x + w.fy * y + w.phase).sin())
            .sum()
    }

    /// Noise-free intensity at face-frame coordinates.
    fn intensity(&self, x: f64, y: f64) -> f64 {
        let face = &self.face_ellipse;
        if !face.contains(x, y) {
            return self.background;
        }
        if y < self.hairline {
            return self.hair_intensity + 0.3 * self.texture(x, y);
        }
        let eye = |c: (f64, f64)| {
            let u = (x - c.0) / self.eye_radius.0;
            let v = (y - c.1) / self.eye_radius.1;
            u * u + v * v <= 1.0
        };
        if eye(self.left_eye) || eye(self.right_eye) {
            return self.eye_intensity;
        }
        let brow_x = (self.right_eye.0 - self.left_eye.0) / 2.0 + self.eye_radius.0 * 1.2;
        let mid_x = (self.left_eye.0 + self.right_eye.0) / 2.0;
        if y >= self.brow_band.0 && y <= self.brow_band.1 && (x - mid_x).abs() <= brow_x {
            // gap between the brows
            if (x - mid_x).abs() > 0.08 * face.rx {
                return self.brow_intensity;
            }
        }
        if y >= self.mouth_band.0 && y <= self.mouth_band.1 && (x - mid_x).abs() <= self.mouth_half_width {
            return self.mouth_intensity;
        }
        let mut v = self.base_intensity + self.texture(x, y);
        let eye_y = (self.left_eye.1 + self.right_eye.1) / 2.0;
        if y > eye_y && y < eye_y + self.nose_length && (x - mid_x).abs() <= 0.05 * face.rx + 1.0 {
            v += self.nose_delta;
        }
        // darker shading towards the face outline
        let edge = face.norm(x, y);
        v - 25.0 * edge * edge
    }

    /// Landmarks in face-frame coordinates shifted by `(dx, dy)` and clamped
    /// into a `size`×`size` image.
    fn landmarks(&self, dx: i32, dy: i32, size: usize) -> LandmarkSet {
        let max = size as i32 - 1;
        let pt = |x: f64, y: f64| {
            Point::new(
                (x.round() as i32 + dx).clamp(0, max),
                (y.round() as i32 + dy).clamp(0, max),
            )
        };
        let face = &self.face_ellipse;
        let mid_x = (self.left_eye.0 + self.right_eye.0) / 2.0;
        let eye_y = (self.left_eye.1 + self.right_eye.1) / 2.0;

        let brow_x0 = self.left_eye.0 - self.eye_radius.0 * 1.2;
        let brow_x1 = self.right_eye.0 + self.eye_radius.0 * 1.2;
        let forehead_top = self.hairline;
        let forehead_bottom = self.brow_band.1 + 1.0;
        let forehead = vec![
            pt(brow_x0, forehead_top),
            pt(brow_x1, forehead_top),
            pt(brow_x1, forehead_bottom),
            pt(brow_x0, forehead_bottom),
        ];

        // Lower face: from just under the nose, down along the jaw outline.
        let top_y = eye_y + self.nose_length * 0.8;
        let jaw_point = |t: f64| {
            // angle measured from the bottom of the ellipse
            let (s, c) = t.sin_cos();
            (face.cx + face.rx * s, face.cy + face.ry * c)
        };
        let v_top = ((top_y - face.cy) / face.ry).clamp(-1.0, 1.0);
        let t_max = v_top.acos();
        let steps = 8;
        let mut beard = Vec::with_capacity(steps + 3);
        for i in 0..=steps {
            let t = -t_max + 2.0 * t_max * i as f64 / steps as f64;
            let (x, y) = jaw_point(t);
            beard.push(pt(x, y.min(size as f64 - 1.0)));
        }
        // notch above the upper lip so the mouth surround is included but
        // the nose tip is not
        beard.push(pt(mid_x + self.mouth_half_width * 0.5, top_y));
        beard.push(pt(mid_x - self.mouth_half_width * 0.5, top_y));
        beard.reverse();

        LandmarkSet {
            left_eye: pt(self.left_eye.0, self.left_eye.1),
            right_eye: pt(self.right_eye.0, self.right_eye.1),
            nose: pt(mid_x, eye_y + self.nose_length),
            mouth_center: pt(mid_x, (self.mouth_band.0 + self.mouth_band.1) / 2.0),
            forehead_polygon: Polygon::new(forehead).expect("forehead polygon has area"),
            beard_polygon: Polygon::new(beard).expect("beard polygon has area"),
        }
    }
}

/// Ground-truth facial landmarks of one rendered image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub left_eye: Point,
    pub right_eye: Point,
    pub nose: Point,
    pub mouth_center: Point,
    pub forehead_polygon: Polygon,
    pub beard_polygon: Polygon,
}

impl LandmarkSet {
    pub fn validate(&self, img: &Image) -> Result<()> {
        if self.right_eye.x <= self.left_eye.x {
            return Err(Error::Landmark(format!(
                "right eye x ({}) must exceed left eye x ({})",
                self.right_eye.x, self.left_eye.x
            )));
        }
        let points = [self.left_eye, self.right_eye, self.nose, self.mouth_center];
        let polys = self
            .forehead_polygon
            .vertices()
            .iter()
            .chain(self.beard_polygon.vertices());
        for p in points.iter().chain(polys) {
            if !p.in_bounds(img) {
                return Err(Error::Landmark(format!(
                    "point ({}, {}) outside {}x{} image",
                    p.x,
                    p.y,
                    img.width(),
                    img.height()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub landmarks: LandmarkSet,
    pub subject_id: u32,
    pub sample_index: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_subjects(&self) -> usize {
        let mut ids: Vec<u32> = self.samples.iter().map(|s| s.subject_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    pub fn images(&self) -> Vec<Image> {
        self.samples.iter().map(|s| s.image.clone()).collect()
    }
}

/// Render one sample of a subject with its per-sample jitter.
pub fn render_sample(params: &SubjectParams, sample_index: u32, size: usize, dataset_seed: u64) -> Sample {
    let child = seed::derive(
        dataset_seed,
        &[tag::SAMPLE, params.subject_id as u64, sample_index as u64],
    );
    let mut rng = seed::rng(child);
    let dx = rng.random_range(-JITTER_TRANSLATION..=JITTER_TRANSLATION);
    let dy = rng.random_range(-JITTER_TRANSLATION..=JITTER_TRANSLATION);
    let brightness = rng.random_range(-JITTER_BRIGHTNESS..=JITTER_BRIGHTNESS);
    let noise = Normal::new(0.0, SENSOR_NOISE_SIGMA).expect("finite sigma");

    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let fx = (x as i32 - dx) as f64;
            let fy = (y as i32 - dy) as f64;
            let v = params.intensity(fx, fy) + brightness + noise.sample(&mut rng);
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    let image = Image::new(size, size, 1, data).expect("square buffer");
    Sample {
        landmarks: params.landmarks(dx, dy, size),
        image,
        subject_id: params.subject_id,
        sample_index,
    }
}

/// Generate `n_subjects × samples_per_subject` square grayscale faces.
pub fn generate_dataset(
    n_subjects: usize,
    samples_per_subject: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_subjects < 2 {
        return Err(Error::Parameter(format!("need at least 2 subjects, got {n_subjects}")));
    }
    if samples_per_subject < 2 {
        return Err(Error::Parameter(format!(
            "need at least 2 samples per subject, got {samples_per_subject}"
        )));
    }
    if image_size < MIN_IMAGE_SIZE {
        return Err(Error::Parameter(format!(
            "image size must be at least {MIN_IMAGE_SIZE}, got {image_size}"
        )));
    }
    generate_subjects(0, n_subjects, samples_per_subject, image_size, seed)
}

/// Like [`generate_dataset`] but for subject ids `first..first + n`. Lets
/// callers build disjoint identity pools from one seed.
pub fn generate_subjects(
    first_subject: u32,
    n_subjects: usize,
    samples_per_subject: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset> {
    use rayon::prelude::*;

    let samples = (0..n_subjects as u32)
        .into_par_iter()
        .flat_map_iter(|i| {
            let params = SubjectParams::sample(first_subject + i, image_size, seed);
            (0..samples_per_subject as u32)
                .map(move |k| render_sample(&params, k, image_size, seed))
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(Dataset { samples, seed })
}

/// Deterministic partition of the dataset's sample indices into
/// `(clean, to_distort)`, with `round(fraction * len)` images to distort.
pub fn split_protocol(ds: &Dataset, distorted_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    split_indices(ds.len(), distorted_fraction, seed)
}

/// [`split_protocol`] over `0..n_images`. Both lists are ascending.
pub fn split_indices(n_images: usize, distorted_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&distorted_fraction) {
        return Err(Error::Parameter(format!(
            "distorted fraction must be in [0, 1], got {distorted_fraction}"
        )));
    }
    let n_distort = (distorted_fraction * n_images as f64).round() as usize;
    let mut order: Vec<usize> = (0..n_images).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed, &[tag::SPLIT])));
    let mut distorted = order[..n_distort].to_vec();
    let mut clean = order[n_distort..].to_vec();
    distorted.sort_unstable();
    clean.sort_unstable();
    Ok((clean, distorted))
}

// ---------------------------------------------------------------------------
// manifest

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub subject_id: u32,
    pub sample_index: u32,
    pub landmarks: LandmarkSet,
}

pub fn sample_file_name(subject_id: u32, sample_index: u32) -> String {
    format!("s{subject_id:04}_{sample_index:03}.pgm")
}

/// Write every image as a PGM into `dir` plus `manifest.json`.
pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::with_capacity(ds.len());
    let mut written = Vec::with_capacity(ds.len() + 1);
    for s in &ds.samples {
        let name = sample_file_name(s.subject_id, s.sample_index);
        let path = dir.join(&name);
        write_image(&s.image, &path)?;
        written.push(path);
        manifest.push(ManifestEntry {
            path: name,
            subject_id: s.subject_id,
            sample_index: s.sample_index,
            landmarks: s.landmarks.clone(),
        });
    }
    let mpath = dir.join(MANIFEST_NAME);
    write_json(&mpath, &manifest)?;
    written.push(mpath);
    Ok(written)
}

/// Load a dataset directory written by [`write_dataset`] (or by the
/// `distort` subcommand, which keeps the manifest format).
pub fn read_dataset(dir: impl AsRef<Path>, seed: u64) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest: Vec<ManifestEntry> = read_json(dir.join(MANIFEST_NAME))?;
    let samples = manifest
        .into_iter()
        .map(|e| {
            Ok(Sample {
                image: read_image(dir.join(&e.path))?,
                landmarks: e.landmarks,
                subject_id: e.subject_id,
                sample_index: e.sample_index,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples, seed })
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_abs_diff(a: &Image, b: &Image) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x as f64 - y as f64).abs())
            .sum::<f64>()
            / a.data().len() as f64
    }

    #[test]
    fn small_dataset_is_reproducible() {
        let a = generate_dataset(2, 2, 64, 7).unwrap();
        let b = generate_dataset(2, 2, 64, 7).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a.n_subjects(), 2);
        assert_eq!(a, b);
        let c = generate_dataset(2, 2, 64, 8).unwrap();
        assert_ne!(a.samples[0].image, c.samples[0].image);
    }

    #[test]
    fn parameter_minimums() {
        assert!(matches!(generate_dataset(1, 2, 64, 0), Err(Error::Parameter(_))));
        assert!(matches!(generate_dataset(2, 1, 64, 0), Err(Error::Parameter(_))));
        assert!(matches!(generate_dataset(2, 2, 47, 0), Err(Error::Parameter(_))));
        assert!(generate_dataset(2, 2, 48, 0).is_ok());
    }

    #[test]
    fn within_subject_pixels_closer_than_across() {
        let ds = generate_dataset(24, 2, 64, 11).unwrap();
        let mut within = 0.0;
        let mut across = 0.0;
        let mut pairs = 0;
        for s in 0..23 {
            let a0 = &ds.samples[2 * s].image;
            let a1 = &ds.samples[2 * s + 1].image;
            let b0 = &ds.samples[2 * (s + 1)].image;
            within += mean_abs_diff(a0, a1);
            across += mean_abs_diff(a0, b0);
            pairs += 1;
        }
        assert!(pairs >= 20);
        assert!(within < across, "within {within} across {across}");
    }

    #[test]
    fn landmarks_valid_for_every_image() {
        for size in [48, 64, 96] {
            let ds = generate_dataset(30, 3, size, 5).unwrap();
            for s in &ds.samples {
                s.landmarks.validate(&s.image).unwrap();
            }
        }
    }

    #[test]
    fn split_counts_and_determinism() {
        let (clean, dist) = split_indices(858, 0.5, 3).unwrap();
        assert_eq!(dist.len(), 429);
        assert_eq!(clean.len(), 429);
        let (clean2, dist2) = split_indices(858, 0.5, 3).unwrap();
        assert_eq!((clean, dist), (clean2, dist2));

        let ds = generate_dataset(5, 2, 48, 0).unwrap();
        let (clean, dist) = split_protocol(&ds, 0.0, 3).unwrap();
        assert_eq!(clean, (0..10).collect::<Vec<_>>());
        assert!(dist.is_empty());
        let (_, dist) = split_protocol(&ds, 1.0, 3).unwrap();
        assert_eq!(dist.len(), 10);

        assert!(split_indices(10, 1.5, 0).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let ds = generate_dataset(2, 2, 48, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let written = write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(written.len(), 5);
        let back = read_dataset(dir.path(), ds.seed).unwrap();
        assert_eq!(back, ds);

        let text = fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let lm = &v[0]["landmarks"];
        for key in ["left_eye", "right_eye", "nose", "mouth_center", "forehead_polygon", "beard_polygon"] {
            assert!(lm.get(key).is_some(), "missing {key}");
        }
        assert!(lm["forehead_polygon"][0].as_array().unwrap().len() == 2);
    }
}
