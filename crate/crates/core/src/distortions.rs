//! The five image distortions: grid occlusion, most-significant-bit noise,
//! eye-region, forehead/brow and beard-like occlusion.
//!
//! Every function is pure. Randomized distortions take their seed from the
//! spec; there is no shared generator.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{fill_polygon_in_place, raster_line, Image, Point, Polygon};
use crate::seed::{self, tag};
use crate::synthface::LandmarkSet;

pub const DEFAULT_RHO_GRIDS: usize = 10;
pub const DEFAULT_PHI: [f64; 3] = [0.03, 0.05, 0.10];
pub const DEFAULT_PSI: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistortionKind {
    Grids,
    Xmsb,
    Ero,
    Fhbo,
    Beard,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 5] = [
        DistortionKind::Grids,
        DistortionKind::Xmsb,
        DistortionKind::Fhbo,
        DistortionKind::Ero,
        DistortionKind::Beard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistortionKind::Grids => "grids",
            DistortionKind::Xmsb => "xmsb",
            DistortionKind::Ero => "ero",
            DistortionKind::Fhbo => "fhbo",
            DistortionKind::Beard => "beard",
        }
    }

    pub fn needs_landmarks(self) -> bool {
        matches!(self, DistortionKind::Ero | DistortionKind::Fhbo | DistortionKind::Beard)
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "grids" => Ok(DistortionKind::Grids),
            "xmsb" => Ok(DistortionKind::Xmsb),
            "ero" => Ok(DistortionKind::Ero),
            "fhbo" => Ok(DistortionKind::Fhbo),
            "beard" => Ok(DistortionKind::Beard),
            other => Err(Error::Usage(format!("unknown distortion kind {other:?}"))),
        }
    }
}

fn default_rho() -> usize {
    DEFAULT_RHO_GRIDS
}

fn default_phi() -> [f64; 3] {
    DEFAULT_PHI
}

fn default_psi() -> f64 {
    DEFAULT_PSI
}

/// Parameterization of one distortion, e.g.
/// `{"kind":"xmsb","phi":[0.03,0.05,0.10],"seed":42}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DistortionSpec {
    Grids {
        #[serde(default = "default_rho")]
        rho_grids: usize,
        #[serde(default)]
        seed: u64,
    },
    Xmsb {
        #[serde(default = "default_phi")]
        phi: [f64; 3],
        #[serde(default)]
        seed: u64,
    },
    Ero {
        #[serde(default = "default_psi")]
        psi: f64,
    },
    Fhbo,
    Beard,
}

impl DistortionSpec {
    /// Toolkit defaults for `kind` with the given seed (ignored by the
    /// deterministic kinds).
    pub fn default_for(kind: DistortionKind, seed: u64) -> Self {
        match kind {
            DistortionKind::Grids => DistortionSpec::Grids {
                rho_grids: DEFAULT_RHO_GRIDS,
                seed,
            },
            DistortionKind::Xmsb => DistortionSpec::Xmsb { phi: DEFAULT_PHI, seed },
            DistortionKind::Ero => DistortionSpec::Ero { psi: DEFAULT_PSI },
            DistortionKind::Fhbo => DistortionSpec::Fhbo,
            DistortionKind::Beard => DistortionSpec::Beard,
        }
    }

    pub fn kind(&self) -> DistortionKind {
        match self {
            DistortionSpec::Grids { .. } => DistortionKind::Grids,
            DistortionSpec::Xmsb { .. } => DistortionKind::Xmsb,
            DistortionSpec::Ero { .. } => DistortionKind::Ero,
            DistortionSpec::Fhbo => DistortionKind::Fhbo,
            DistortionSpec::Beard => DistortionKind::Beard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DistortionSpec::Xmsb { phi, .. } => {
                if let Some(p) = phi.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                    return Err(Error::Parameter(format!("xmsb fraction {p} outside [0, 1]")));
                }
            }
            DistortionSpec::Ero { psi } => {
                if !(psi.is_finite() && *psi > 0.0) {
                    return Err(Error::Parameter(format!("ero psi must be positive, got {psi}")));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// The same distortion with its seed replaced by a child seed for item
    /// `key`, so each image of a batch gets an independent draw.
    pub fn for_item(&self, key: u64) -> Self {
        let mut out = self.clone();
        match &mut out {
            DistortionSpec::Grids { seed, .. } | DistortionSpec::Xmsb { seed, .. } => {
                *seed = seed::derive(*seed, &[tag::DISTORT, key]);
            }
            _ => {}
        }
        out
    }
}

/// Audit trail of one application.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionRecord {
    pub spec: DistortionSpec,
    /// Distinct pixels written by the distortion.
    pub affected_pixel_count: usize,
    /// Seed of the generator actually used (0 for deterministic kinds).
    pub rng_trace_seed: u64,
}

/// The `n` grid segments for a `width`×`height` image: even-numbered lines
/// start on the top edge and end on the bottom edge, odd-numbered ones go
/// from the left edge to the right edge. Free coordinates are uniform.
pub fn grid_segments(width: usize, height: usize, n: usize, seed: u64) -> Vec<(Point, Point)> {
    let mut rng = seed::rng(seed);
    let (w, h) = (width as i32, height as i32);
    (0..n)
        .map(|i| {
            if i % 2 == 0 {
                let x0 = rng.random_range(0..w);
                let x1 = rng.random_range(0..w);
                (Point::new(x0, 0), Point::new(x1, h - 1))
            } else {
                let y0 = rng.random_range(0..h);
                let y1 = rng.random_range(0..h);
                (Point::new(0, y0), Point::new(w - 1, y1))
            }
        })
        .collect()
}

/// Zero every pixel on the given segments; returns the number of distinct
/// pixels drawn.
pub fn occlude_segments(img: &mut Image, segments: &[(Point, Point)]) -> usize {
    let mut touched = vec![false; img.pixel_count()];
    for &(a, b) in segments {
        for p in raster_line(a, b) {
            let i = p.y as usize * img.width() + p.x as usize;
            touched[i] = true;
            img.fill_pixel_index(i, 0);
        }
    }
    touched.iter().filter(|&&t| t).count()
}

pub fn apply_grids(img: &Image, rho_grids: usize, seed: u64) -> (Image, DistortionRecord) {
    let mut out = img.clone();
    let segments = grid_segments(img.width(), img.height(), rho_grids, seed);
    let affected = occlude_segments(&mut out, &segments);
    (
        out,
        DistortionRecord {
            spec: DistortionSpec::Grids { rho_grids, seed },
            affected_pixel_count: affected,
            rng_trace_seed: seed,
        },
    )
}

/// Pixel indices selected for each of the three most significant bits.
///
/// Set `i` is the first `floor(phi[i] * n_pixels)` entries of a seeded
/// permutation private to that bit, so sets may overlap across bits and a
/// larger fraction always selects a superset.
pub fn xmsb_selection(n_pixels: usize, phi: [f64; 3], seed: u64) -> [Vec<usize>; 3] {
    let mut bit = 0u64;
    phi.map(|p| {
        let count = ((p * n_pixels as f64).floor() as usize).min(n_pixels);
        let mut rng = seed::rng(seed::derive(seed, &[bit]));
        bit += 1;
        let mut order: Vec<usize> = (0..n_pixels).collect();
        order.shuffle(&mut rng);
        order.truncate(count);
        order
    })
}

pub fn apply_xmsb(img: &Image, phi: [f64; 3], seed: u64) -> Result<(Image, DistortionRecord)> {
    let spec = DistortionSpec::Xmsb { phi, seed };
    spec.validate()?;
    let mut out = img.clone();
    let sets = xmsb_selection(img.pixel_count(), phi, seed);
    let c = img.channels();
    let mut touched = vec![false; img.pixel_count()];
    for (bit, set) in sets.iter().enumerate() {
        let flip = 0x80u8 >> bit;
        for &p in set {
            touched[p] = true;
            for v in &mut out.data_mut()[p * c..(p + 1) * c] {
                *v ^= flip;
            }
        }
    }
    let affected = touched.iter().filter(|&&t| t).count();
    Ok((
        out,
        DistortionRecord {
            spec,
            affected_pixel_count: affected,
            rng_trace_seed: seed,
        },
    ))
}

/// Inclusive row range of the eye occlusion band, clamped to the image.
pub fn ero_band(landmarks: &LandmarkSet, psi: f64, height: usize) -> Result<(usize, usize)> {
    let (le, re) = (landmarks.left_eye, landmarks.right_eye);
    let d_eye = re.x - le.x;
    if d_eye <= 0 {
        return Err(Error::Landmark(format!(
            "inter-eye distance must be positive, got {d_eye}"
        )));
    }
    if !(psi.is_finite() && psi > 0.0) {
        return Err(Error::Parameter(format!("ero psi must be positive, got {psi}")));
    }
    let y_e = ((le.y + re.y) as f64 / 2.0).round();
    let half = d_eye as f64 / psi;
    let top = (y_e - half).ceil().max(0.0);
    let bottom = (y_e + half).floor().min(height as f64 - 1.0);
    if top > bottom {
        return Err(Error::Landmark(format!(
            "eye band centred on row {y_e} lies outside the image"
        )));
    }
    Ok((top as usize, bottom as usize))
}

pub fn apply_ero(img: &Image, landmarks: &LandmarkSet, psi: f64) -> Result<(Image, DistortionRecord)> {
    let (top, bottom) = ero_band(landmarks, psi, img.height())?;
    let mut out = img.clone();
    let row = img.width() * img.channels();
    out.data_mut()[top * row..(bottom + 1) * row].fill(0);
    Ok((
        out,
        DistortionRecord {
            spec: DistortionSpec::Ero { psi },
            affected_pixel_count: (bottom - top + 1) * img.width(),
            rng_trace_seed: 0,
        },
    ))
}

fn occlude_polygon(img: &Image, poly: &Polygon, spec: DistortionSpec) -> Result<(Image, DistortionRecord)> {
    let mut out = img.clone();
    let affected = fill_polygon_in_place(&mut out, poly, 0);
    Ok((
        out,
        DistortionRecord {
            spec,
            affected_pixel_count: affected,
            rng_trace_seed: 0,
        },
    ))
}

pub fn apply_fhbo(img: &Image, landmarks: &LandmarkSet) -> Result<(Image, DistortionRecord)> {
    occlude_polygon(img, &landmarks.forehead_polygon, DistortionSpec::Fhbo)
}

pub fn apply_beard(img: &Image, landmarks: &LandmarkSet) -> Result<(Image, DistortionRecord)> {
    occlude_polygon(img, &landmarks.beard_polygon, DistortionSpec::Beard)
}

/// Apply `spec` to `img`. Face-level kinds require landmarks.
pub fn apply(spec: &DistortionSpec, img: &Image, landmarks: Option<&LandmarkSet>) -> Result<(Image, DistortionRecord)> {
    spec.validate()?;
    let need = |kind: DistortionKind| {
        landmarks.ok_or_else(|| Error::Usage(format!("{kind} distortion requires landmarks")))
    };
    match *spec {
        DistortionSpec::Grids { rho_grids, seed } => Ok(apply_grids(img, rho_grids, seed)),
        DistortionSpec::Xmsb { phi, seed } => apply_xmsb(img, phi, seed),
        DistortionSpec::Ero { psi } => apply_ero(img, need(DistortionKind::Ero)?, psi),
        DistortionSpec::Fhbo => apply_fhbo(img, need(DistortionKind::Fhbo)?),
        DistortionSpec::Beard => apply_beard(img, need(DistortionKind::Beard)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthface::generate_dataset;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    /// Integer DDA: step along the major axis, round the minor coordinate.
    fn dda(a: Point, b: Point) -> BTreeSet<Point> {
        let dx = b.x - a.x;
        let dy = b.y - a.y;
        let steps = dx.abs().max(dy.abs());
        if steps == 0 {
            return [a].into();
        }
        (0..=steps)
            .map(|i| {
                // round(a + i*d/steps) with exact integer arithmetic
                let r = |a: i32, d: i32| {
                    let num = 2 * (a * steps + i * d) + steps;
                    num.div_euclid(2 * steps)
                };
                Point::new(r(a.x, dx), r(a.y, dy))
            })
            .collect()
    }

    fn landmarks_with_eyes(le: (i32, i32), re: (i32, i32)) -> LandmarkSet {
        LandmarkSet {
            left_eye: Point::new(le.0, le.1),
            right_eye: Point::new(re.0, re.1),
            nose: Point::new(32, 40),
            mouth_center: Point::new(32, 50),
            forehead_polygon: Polygon::rect(10, 5, 50, 15).unwrap(),
            beard_polygon: Polygon::rect(12, 45, 52, 60).unwrap(),
        }
    }

    #[test]
    fn grids_zero_lines_is_identity() {
        let img = Image::from_fn(16, 16, |x, y| (x * y) as u8).unwrap();
        let (out, rec) = apply_grids(&img, 0, 9);
        assert_eq!(out, img);
        assert_eq!(rec.affected_pixel_count, 0);
    }

    #[test]
    fn single_vertical_grid_line() {
        let seed = (0..10_000u64)
            .find(|&s| grid_segments(8, 8, 1, s)[0] == (Point::new(3, 0), Point::new(3, 7)))
            .expect("some seed yields the vertical segment");
        let img = Image::filled(8, 8, 1, 255).unwrap();
        let (out, rec) = apply_grids(&img, 1, seed);
        assert_eq!(img.count_changed_pixels(&out), 8);
        assert_eq!(rec.affected_pixel_count, 8);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(out.get(x, y, 0), if x == 3 { 0 } else { 255 });
            }
        }
    }

    #[test]
    fn grid_lines_match_dda_union() {
        let img = Image::filled(64, 64, 1, 200).unwrap();
        for seed in 0..20 {
            let segs = grid_segments(64, 64, 4, seed);
            assert_eq!(segs.iter().filter(|(a, _)| a.y == 0).count(), 2);
            assert_eq!(segs.iter().filter(|(a, _)| a.x == 0 && a.y != 0).count() <= 2, true);
            let want: BTreeSet<Point> = segs.iter().flat_map(|&(a, b)| dda(a, b)).collect();
            let (out, rec) = apply_grids(&img, 4, seed);
            let got: BTreeSet<Point> = (0..64)
                .flat_map(|y| (0..64).map(move |x| (x, y)))
                .filter(|&(x, y)| out.get(x, y, 0) == 0)
                .map(|(x, y)| Point::new(x as i32, y as i32))
                .collect();
            assert_eq!(got.len(), rec.affected_pixel_count);
            assert!((64..=256).contains(&got.len()), "{}", got.len());
            // DDA and Bresenham may disagree on exact ties; they must agree
            // on almost every pixel and on the count per line.
            let diff = got.symmetric_difference(&want).count();
            assert!(diff <= 8, "seed {seed}: {diff} differing pixels");
        }
    }

    #[test]
    fn xmsb_bit_arithmetic() {
        assert_eq!(200u8 ^ 128, 72);
        let img = Image::new(1, 1, 1, vec![200]).unwrap();
        let (out, rec) = apply_xmsb(&img, [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(out.data(), &[72]);
        assert_eq!(rec.affected_pixel_count, 1);
        let (out, _) = apply_xmsb(&img, [0.0; 3], 3).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn xmsb_full_fraction_flips_top_three_bits() {
        let img = Image::from_fn(9, 7, |x, y| (x * 29 + y * 3) as u8).unwrap();
        let (out, rec) = apply_xmsb(&img, [1.0; 3], 17).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert_eq!(*b, a ^ 0b1110_0000);
        }
        assert_eq!(rec.affected_pixel_count, 63);
    }

    #[test]
    fn xmsb_rejects_bad_fraction() {
        let img = Image::filled(2, 2, 1, 0).unwrap();
        assert!(apply_xmsb(&img, [0.0, 1.5, 0.0], 0).is_err());
    }

    #[test]
    fn ero_band_rows() {
        let img = Image::filled(64, 64, 1, 100).unwrap();
        let lm = landmarks_with_eyes((16, 32), (48, 32));
        let (out, rec) = apply_ero(&img, &lm, 8.0).unwrap();
        assert_eq!(rec.affected_pixel_count, 576);
        for y in 0..64 {
            let zero = (28..=36).contains(&y);
            for x in 0..64 {
                assert_eq!(out.get(x, y, 0) == 0, zero, "row {y}");
            }
        }
    }

    #[test]
    fn ero_limits_and_errors() {
        let lm = landmarks_with_eyes((16, 32), (48, 32));
        assert_eq!(ero_band(&lm, 1e6, 64).unwrap(), (32, 32));
        let near_top = landmarks_with_eyes((16, 2), (48, 2));
        assert_eq!(ero_band(&near_top, 4.0, 64).unwrap(), (0, 10));
        let bad = landmarks_with_eyes((48, 32), (16, 32));
        assert!(matches!(ero_band(&bad, 6.0, 64), Err(Error::Landmark(_))));
    }

    #[test]
    fn polygon_occlusions() {
        let img = Image::filled(64, 64, 1, 180).unwrap();
        let lm = landmarks_with_eyes((20, 25), (44, 25));
        let (out, rec) = apply_fhbo(&img, &lm).unwrap();
        assert_eq!(rec.affected_pixel_count, 41 * 11);
        assert_eq!(img.count_changed_pixels(&out), 41 * 11);
        let (out, rec) = apply_beard(&img, &lm).unwrap();
        assert_eq!(rec.affected_pixel_count, 41 * 16);
        assert_eq!(out.get(11, 50, 0), 180);
        assert_eq!(out.get(12, 50, 0), 0);
    }

    #[test]
    fn apply_dispatch() {
        let ds = generate_dataset(2, 2, 64, 3).unwrap();
        let s = &ds.samples[0];
        let (out, _) = apply(&DistortionSpec::Grids { rho_grids: 0, seed: 1 }, &s.image, None).unwrap();
        assert_eq!(out, s.image);
        let err = apply(&DistortionSpec::Ero { psi: 6.0 }, &s.image, None).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        for kind in DistortionKind::ALL {
            let spec = DistortionSpec::default_for(kind, 5);
            let (out, rec) = apply(&spec, &s.image, Some(&s.landmarks)).unwrap();
            assert!(out.same_shape(&s.image));
            assert!(rec.affected_pixel_count > 0, "{kind}");
        }
    }

    #[test]
    fn spec_json_shapes() {
        let spec: DistortionSpec = serde_json::from_str(r#"{"kind":"xmsb","phi":[0.03,0.05,0.10],"seed":42}"#).unwrap();
        assert_eq!(spec, DistortionSpec::Xmsb { phi: [0.03, 0.05, 0.10], seed: 42 });
        let spec: DistortionSpec = serde_json::from_str(r#"{"kind":"grids"}"#).unwrap();
        assert_eq!(spec, DistortionSpec::Grids { rho_grids: 10, seed: 0 });
        let spec: DistortionSpec = serde_json::from_str(r#"{"kind":"beard"}"#).unwrap();
        assert_eq!(spec.kind(), DistortionKind::Beard);
        assert_eq!(
            serde_json::to_string(&DistortionSpec::Ero { psi: 6.0 }).unwrap(),
            r#"{"kind":"ero","psi":6.0}"#
        );
    }

    fn arb_spec() -> impl Strategy<Value = DistortionSpec> {
        prop_oneof![
            (0usize..15, any::<u64>()).prop_map(|(rho_grids, seed)| DistortionSpec::Grids { rho_grids, seed }),
            ([0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0], any::<u64>())
                .prop_map(|(phi, seed)| DistortionSpec::Xmsb { phi, seed }),
            (0.5f64..20.0).prop_map(|psi| DistortionSpec::Ero { psi }),
            Just(DistortionSpec::Fhbo),
            Just(DistortionSpec::Beard),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn dimensions_preserved_and_deterministic(spec in arb_spec(), sample in 0usize..4, seed in 0u64..4) {
            let ds = generate_dataset(2, 2, 48, seed).unwrap();
            let s = &ds.samples[sample];
            let (a, ra) = apply(&spec, &s.image, Some(&s.landmarks)).unwrap();
            let (b, rb) = apply(&spec, &s.image, Some(&s.landmarks)).unwrap();
            prop_assert!(a.same_shape(&s.image));
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(ra, rb);
        }

        #[test]
        fn occlusions_only_write_zero(spec in arb_spec(), sample in 0usize..4) {
            prop_assume!(spec.kind() != DistortionKind::Xmsb);
            let ds = generate_dataset(2, 2, 48, 1).unwrap();
            let s = &ds.samples[sample];
            let (out, rec) = apply(&spec, &s.image, Some(&s.landmarks)).unwrap();
            for (a, b) in s.image.data().iter().zip(out.data()) {
                prop_assert!(a == b || *b == 0);
            }
            prop_assert!(rec.affected_pixel_count <= s.image.pixel_count());
        }

        #[test]
        fn ero_modifies_only_band(psi in 0.5f64..30.0, sample in 0usize..4) {
            let ds = generate_dataset(2, 2, 64, 2).unwrap();
            let s = &ds.samples[sample];
            let (top, bottom) = ero_band(&s.landmarks, psi, 64).unwrap();
            let (out, _) = apply_ero(&s.image, &s.landmarks, psi).unwrap();
            for y in 0..64 {
                for x in 0..64 {
                    if y < top || y > bottom {
                        prop_assert_eq!(out.get(x, y, 0), s.image.get(x, y, 0));
                    } else {
                        prop_assert_eq!(out.get(x, y, 0), 0);
                    }
                }
            }
        }

        #[test]
        fn xmsb_coverage_monotone(p in [0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0], bump in 0.0f64..0.5, which in 0usize..3, seed in any::<u64>()) {
            let img = Image::filled(20, 20, 1, 77).unwrap();
            let mut q = p;
            q[which] = (q[which] + bump).min(1.0);
            let (_, lo) = apply_xmsb(&img, p, seed).unwrap();
            let (_, hi) = apply_xmsb(&img, q, seed).unwrap();
            prop_assert!(hi.affected_pixel_count >= lo.affected_pixel_count);
        }

        #[test]
        fn grids_modify_only_line_pixels(rho in 0usize..12, seed in any::<u64>()) {
            let img = Image::filled(32, 24, 3, 99).unwrap();
            let segs = grid_segments(32, 24, rho, seed);
            let on_line: BTreeSet<Point> = segs.iter().flat_map(|&(a, b)| raster_line(a, b)).collect();
            let (out, rec) = apply_grids(&img, rho, seed);
            prop_assert_eq!(rec.affected_pixel_count, on_line.len());
            for y in 0..24 {
                for x in 0..32 {
                    let p = Point::new(x as i32, y as i32);
                    let expect = if on_line.contains(&p) { [0, 0, 0] } else { [99, 99, 99] };
                    prop_assert_eq!(out.pixel(x, y), &expect);
                }
            }
        }
    }
}
