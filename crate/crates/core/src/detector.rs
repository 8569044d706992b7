//! Distortion detection from hidden-layer statistics.
//!
//! A clean corpus defines a mean activation vector per tapped layer. Any
//! image is then summarized by one Canberra distance per layer between its
//! activations and those means, and a linear max-margin classifier over the
//! (z-scored) distance vector separates clean from distorted inputs.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featnet::{forward, LayerActivations, NetworkModel};
use crate::image::Image;
use crate::seed::{self, tag};

pub const MEAN_REPS_MAGIC: &[u8; 5] = b"MREP1";
pub const DEFAULT_C_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];
pub const CV_FOLDS: usize = 5;
pub const STD_FLOOR: f64 = 1e-8;

/// Layer-wise mean representations μ_i over a clean corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanReps {
    pub means: Vec<Vec<f64>>,
    pub n_train: usize,
}

impl MeanReps {
    pub fn lengths(&self) -> Vec<usize> {
        self.means.iter().map(Vec::len).collect()
    }

    fn check(&self, model: &NetworkModel) -> Result<()> {
        if self.lengths() != model.tap_lengths() {
            return Err(Error::Shape(format!(
                "mean representations have layer lengths {:?}, model taps have {:?}",
                self.lengths(),
                model.tap_lengths()
            )));
        }
        Ok(())
    }
}

/// Running double-precision sum of tapped activations.
#[derive(Clone, Debug)]
struct ActSum {
    sums: Vec<Vec<f64>>,
    n: usize,
}

impl ActSum {
    fn zeros(lengths: &[usize]) -> Self {
        ActSum {
            sums: lengths.iter().map(|&l| vec![0.0; l]).collect(),
            n: 0,
        }
    }

    fn add(mut self, acts: &LayerActivations) -> Self {
        for (s, a) in self.sums.iter_mut().zip(&acts.layers) {
            for (x, &v) in s.iter_mut().zip(a) {
                *x += v as f64;
            }
        }
        self.n += 1;
        self
    }

    fn merge(mut self, other: ActSum) -> Self {
        for (s, o) in self.sums.iter_mut().zip(other.sums) {
            for (x, v) in s.iter_mut().zip(o) {
                *x += v;
            }
        }
        self.n += other.n;
        self
    }
}

/// μ_i = (1/N) Σ_j φ_i(I_j).
///
/// Images are summed in fixed-size chunks that are then combined in index
/// order, so the result does not depend on thread scheduling.
pub fn compute_mean_reps(model: &NetworkModel, clean_images: &[Image]) -> Result<MeanReps> {
    if clean_images.is_empty() {
        return Err(Error::Parameter("mean representations need at least one image".into()));
    }
    const CHUNK: usize = 32;
    let lengths = model.tap_lengths();
    let partials = clean_images
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk.iter().try_fold(ActSum::zeros(&lengths), |acc, img| {
                Ok::<_, Error>(acc.add(&forward(model, img, None)?.acts))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let total = partials
        .into_iter()
        .fold(ActSum::zeros(&lengths), ActSum::merge);
    let n = total.n as f64;
    Ok(MeanReps {
        means: total
            .sums
            .into_iter()
            .map(|s| s.into_iter().map(|v| v / n).collect())
            .collect(),
        n_train: total.n,
    })
}

/// Σ_z |a_z − b_z| / (|a_z| + |b_z|), with 0/0 terms counted as 0.
pub fn canberra(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let den = x.abs() + y.abs();
            if den == 0.0 {
                0.0
            } else {
                (x - y).abs() / den
            }
        })
        .sum()
}

/// Ψ: one Canberra distance per tapped layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DistanceFeatures(pub Vec<f64>);

pub fn features_from_acts(mean_reps: &MeanReps, acts: &LayerActivations) -> DistanceFeatures {
    DistanceFeatures(
        acts.layers
            .iter()
            .zip(&mean_reps.means)
            .map(|(a, mu)| {
                a.iter()
                    .zip(mu)
                    .map(|(&x, &m)| {
                        let x = x as f64;
                        let den = x.abs() + m.abs();
                        if den == 0.0 {
                            0.0
                        } else {
                            (x - m).abs() / den
                        }
                    })
                    .sum()
            })
            .collect(),
    )
}

pub fn canberra_features(model: &NetworkModel, mean_reps: &MeanReps, img: &Image) -> Result<DistanceFeatures> {
    mean_reps.check(model)?;
    let out = forward(model, img, None)?;
    Ok(features_from_acts(mean_reps, &out.acts))
}

/// Features for a batch, in input order.
pub fn batch_features(model: &NetworkModel, mean_reps: &MeanReps, images: &[Image]) -> Result<Vec<DistanceFeatures>> {
    mean_reps.check(model)?;
    images
        .par_iter()
        .map(|img| canberra_features(model, mean_reps, img))
        .collect()
}

// ---------------------------------------------------------------------------
// linear max-margin classifier

/// Training schedule of the subgradient solver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SvmSchedule {
    pub epochs: usize,
    /// Backtracking step-size halvings allowed per epoch.
    pub max_halvings: usize,
}

impl Default for SvmSchedule {
    fn default() -> Self {
        SvmSchedule {
            epochs: 200,
            max_halvings: 40,
        }
    }
}

/// Linear soft-margin classifier `w·x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSvm {
    pub w: Vec<f64>,
    pub b: f64,
    /// Primal objective after every epoch, starting with the initial point.
    pub objective_trace: Vec<f64>,
}

/// `½‖w‖² + C Σ max(0, 1 − y(w·x + b))`.
pub fn hinge_objective(w: &[f64], b: f64, c: f64, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
    let reg = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
    let loss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, &y)| (1.0 - y * (dot(w, x) + b)).max(0.0))
        .sum();
    reg + c * loss
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full-batch subgradient descent on the L2-regularized hinge loss.
///
/// Each epoch computes the full-batch subgradient and takes the largest step
/// from a decreasing schedule, halved until the objective does not increase.
/// Examples are visited in a seeded order when summing, which fixes the
/// floating-point reduction order. If no step decreases the objective, the
/// iterate stays put, so the recorded objective is non-increasing.
pub fn train_linear_svm(xs: &[Vec<f64>], ys: &[f64], c: f64, schedule: SvmSchedule, seed: u64) -> LinearSvm {
    let dim = xs.first().map_or(0, Vec::len);
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed, &[tag::SVM])));

    let mut obj = hinge_objective(&w, b, c, xs, ys);
    let mut trace = Vec::with_capacity(schedule.epochs + 1);
    trace.push(obj);
    for epoch in 0..schedule.epochs {
        let mut gw = w.clone();
        let mut gb = 0.0;
        for &i in &order {
            let (x, y) = (&xs[i], ys[i]);
            if y * (dot(&w, x) + b) < 1.0 {
                for (g, v) in gw.iter_mut().zip(x) {
                    *g -= c * y * v;
                }
                gb -= c * y;
            }
        }
        let gnorm = (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
        if gnorm == 0.0 {
            trace.push(obj);
            continue;
        }
        // normalized subgradient step of length 1/sqrt(epoch + 1)
        let mut step = 1.0 / ((1.0 + epoch as f64).sqrt() * gnorm);
        for _ in 0..schedule.max_halvings {
            let cand_w: Vec<f64> = w.iter().zip(&gw).map(|(v, g)| v - step * g).collect();
            let cand_b = b - step * gb;
            let cand = hinge_objective(&cand_w, cand_b, c, xs, ys);
            if cand <= obj {
                w = cand_w;
                b = cand_b;
                obj = cand;
                break;
            }
            step *= 0.5;
        }
        trace.push(obj);
    }
    LinearSvm {
        w,
        b,
        objective_trace: trace,
    }
}

fn accuracy(w: &[f64], b: f64, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
    let correct = xs
        .iter()
        .zip(ys)
        .filter(|(x, &y)| {
            let pred = if dot(w, x) + b > 0.0 { 1.0 } else { -1.0 };
            pred == y
        })
        .count();
    correct as f64 / xs.len().max(1) as f64
}

/// Per-dimension mean and standard deviation (floored).
pub fn feature_stats(xs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let dim = xs.first().map_or(0, Vec::len);
    let n = xs.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|d| xs.iter().map(|x| x[d]).sum::<f64>() / n).collect();
    let std = (0..dim)
        .map(|d| {
            let var = xs.iter().map(|x| (x[d] - mean[d]).powi(2)).sum::<f64>() / n;
            var.sqrt().max(STD_FLOOR)
        })
        .collect();
    (mean, std)
}

/// Trained detector: normalization statistics plus the linear classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub w: Vec<f64>,
    pub b: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub feat_mean: Vec<f64>,
    pub feat_std: Vec<f64>,
    pub n_layers: usize,
    /// Location of the persisted [`MeanReps`], when saved to disk.
    #[serde(default)]
    pub mean_reps_path: Option<String>,
    /// Mean 5-fold accuracy of every candidate C, in grid order.
    #[serde(default)]
    pub cv_accuracy: Vec<(f64, f64)>,
}

impl DetectorModel {
    pub fn normalize(&self, f: &DistanceFeatures) -> Result<Vec<f64>> {
        if f.0.len() != self.n_layers {
            return Err(Error::Shape(format!(
                "detector expects {} features, got {}",
                self.n_layers,
                f.0.len()
            )));
        }
        Ok(f.0
            .iter()
            .zip(self.feat_mean.iter().zip(&self.feat_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    /// Raw decision value `w·normalize(ψ) + b`.
    pub fn score(&self, f: &DistanceFeatures) -> Result<f64> {
        Ok(dot(&self.w, &self.normalize(f)?) + self.b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Clean,
    Distorted,
}

impl Verdict {
    /// Distorted iff the score is strictly positive.
    pub fn from_score(score: f64) -> Self {
        if score > 0.0 {
            Verdict::Distorted
        } else {
            Verdict::Clean
        }
    }
}

/// Train on precomputed features. Label −1 is clean, +1 distorted.
pub fn train_detector_on_features(
    clean: &[DistanceFeatures],
    distorted: &[DistanceFeatures],
    c_grid: &[f64],
    seed: u64,
) -> Result<DetectorModel> {
    if clean.is_empty() || distorted.is_empty() {
        return Err(Error::Parameter("detector training needs both clean and distorted images".into()));
    }
    if c_grid.is_empty() {
        return Err(Error::Parameter("C grid is empty".into()));
    }
    for (name, set) in [("clean", clean), ("distorted", distorted)] {
        if let Some(i) = set.iter().position(|f| f.0.iter().any(|v| !v.is_finite())) {
            return Err(Error::Data(format!("{name} training image {i} has a non-finite feature")));
        }
    }
    let n_layers = clean[0].0.len();
    if clean.iter().chain(distorted).any(|f| f.0.len() != n_layers) {
        return Err(Error::Shape("feature vectors have differing lengths".into()));
    }

    let raw: Vec<Vec<f64>> = clean.iter().chain(distorted).map(|f| f.0.clone()).collect();
    let ys: Vec<f64> = std::iter::repeat_n(-1.0, clean.len())
        .chain(std::iter::repeat_n(1.0, distorted.len()))
        .collect();
    let (feat_mean, feat_std) = feature_stats(&raw);
    let xs: Vec<Vec<f64>> = raw
        .iter()
        .map(|x| x.iter().zip(feat_mean.iter().zip(&feat_std)).map(|(v, (m, s))| (v - m) / s).collect())
        .collect();

    // Stratified-by-shuffle fold assignment.
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.shuffle(&mut seed::rng(seed::derive(seed, &[tag::SVM, 1])));
    let folds = CV_FOLDS.min(xs.len());
    let mut fold_of = vec![0; xs.len()];
    for (k, &i) in idx.iter().enumerate() {
        fold_of[i] = k % folds;
    }

    let schedule = SvmSchedule::default();
    let cv_accuracy: Vec<(f64, f64)> = c_grid
        .par_iter()
        .map(|&c| {
            let acc = (0..folds)
                .map(|k| {
                    let split = |keep: bool| -> (Vec<Vec<f64>>, Vec<f64>) {
                        (0..xs.len())
                            .filter(|&i| (fold_of[i] == k) != keep)
                            .map(|i| (xs[i].clone(), ys[i]))
                            .unzip()
                    };
                    let (tx, ty) = split(true);
                    let (vx, vy) = split(false);
                    let m = train_linear_svm(&tx, &ty, c, schedule, seed::derive(seed, &[k as u64]));
                    accuracy(&m.w, m.b, &vx, &vy)
                })
                .sum::<f64>()
                / folds as f64;
            (c, acc)
        })
        .collect();

    // Highest accuracy; ties go to the smaller C.
    let best_c = cv_accuracy
        .iter()
        .copied()
        .fold(None::<(f64, f64)>, |best, (c, acc)| match best {
            Some((bc, bacc)) if bacc > acc || (bacc == acc && bc <= c) => Some((bc, bacc)),
            _ => Some((c, acc)),
        })
        .map(|(c, _)| c)
        .expect("non-empty grid");

    let final_model = train_linear_svm(&xs, &ys, best_c, schedule, seed);
    Ok(DetectorModel {
        w: final_model.w,
        b: final_model.b,
        c: best_c,
        feat_mean,
        feat_std,
        n_layers,
        mean_reps_path: None,
        cv_accuracy,
    })
}

pub fn train_detector(
    model: &NetworkModel,
    mean_reps: &MeanReps,
    clean: &[Image],
    distorted: &[Image],
    c_grid: &[f64],
    seed: u64,
) -> Result<DetectorModel> {
    if clean.is_empty() || distorted.is_empty() {
        return Err(Error::Parameter("detector training needs both clean and distorted images".into()));
    }
    let cf = batch_features(model, mean_reps, clean)?;
    let df = batch_features(model, mean_reps, distorted)?;
    train_detector_on_features(&cf, &df, c_grid, seed)
}

pub fn detect(det: &DetectorModel, model: &NetworkModel, mean_reps: &MeanReps, img: &Image) -> Result<(f64, Verdict)> {
    let f = canberra_features(model, mean_reps, img)?;
    let score = det.score(&f)?;
    Ok((score, Verdict::from_score(score)))
}

// ---------------------------------------------------------------------------
// persistence

/// `MREP1` container: magic, u32 layer count, u64 N_train, then per layer a
/// u32 length followed by f64 little-endian values.
pub fn encode_mean_reps(m: &MeanReps) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MEAN_REPS_MAGIC);
    buf.extend_from_slice(&(m.means.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.n_train as u64).to_le_bytes());
    for layer in &m.means {
        buf.extend_from_slice(&(layer.len() as u32).to_le_bytes());
        for v in layer {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn decode_mean_reps(bytes: &[u8]) -> Result<MeanReps> {
    if bytes.len() < 5 || &bytes[..5] != MEAN_REPS_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"MREP1\""));
    }
    let mut pos = 5;
    let mut take = |n: usize, layer: usize| -> Result<&[u8]> {
        if bytes.len() - pos < n {
            return Err(Error::Weights {
                layer,
                msg: format!("unexpected end of file at byte {pos}"),
            });
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let n_layers = u32::from_le_bytes(take(4, 0)?.try_into().unwrap()) as usize;
    let n_train = u64::from_le_bytes(take(8, 0)?.try_into().unwrap()) as usize;
    let mut means = Vec::with_capacity(n_layers.min(1024));
    for layer in 0..n_layers {
        let len = u32::from_le_bytes(take(4, layer)?.try_into().unwrap()) as usize;
        let raw = take(len.saturating_mul(8), layer)?;
        means.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    if pos != bytes.len() {
        return Err(Error::format(pos, "trailing bytes after mean representations"));
    }
    if n_train == 0 {
        return Err(Error::format(9, "N_train must be at least 1"));
    }
    Ok(MeanReps { means, n_train })
}

pub fn save_mean_reps(m: &MeanReps, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mean_reps(m)).map_err(|e| Error::io(path, e))
}

pub fn load_mean_reps(path: impl AsRef<Path>) -> Result<MeanReps> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mean_reps(&bytes)
}
