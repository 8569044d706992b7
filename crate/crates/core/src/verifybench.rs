//! All-vs-all verification benchmark: score matrices, ROC curves, GAR at a
//! fixed FAR, and the original / distorted / corrected evaluation protocol.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{features_from_acts, DetectorModel, MeanReps, Verdict};
use crate::distortions::{apply, DistortionSpec};
use crate::error::{Error, Result};
use crate::featnet::{cosine_similarity, embed, forward, NetworkModel};
use crate::image::{median_filter, Image};
use crate::mitigator::{MitigationPlan, MEDIAN_WINDOW};
use crate::synthface::{split_protocol, Dataset};

pub const DEFAULT_FAR_TARGET: f64 = 0.01;
pub const CSV_HEADER: &str = "condition,distortion,gar_at_far,far_target,n_genuine,n_impostor,seed";

/// Square all-vs-all similarity matrix. Diagonal entries are self-matches
/// and belong to neither the genuine nor the impostor set.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    n: usize,
    scores: Vec<f64>,
    ids: Vec<u32>,
}

impl ScoreMatrix {
    pub fn from_embeddings(embeddings: &[Vec<f32>], ids: &[u32]) -> Result<Self> {
        if embeddings.len() != ids.len() {
            return Err(Error::Shape(format!(
                "{} embeddings but {} labels",
                embeddings.len(),
                ids.len()
            )));
        }
        let n = ids.len();
        if n < 2 {
            return Err(Error::Protocol("score matrix needs at least two images".into()));
        }
        if ids.iter().all(|&id| id == ids[0]) {
            return Err(Error::Protocol("score matrix needs at least two subjects".into()));
        }
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (0..n)
                    .map(|j| cosine_similarity(&embeddings[i], &embeddings[j]))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(ScoreMatrix {
            n,
            scores: rows.into_iter().flatten().collect(),
            ids: ids.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn score(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.n + j]
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Same subject and not a self-match.
    pub fn is_genuine(&self, i: usize, j: usize) -> bool {
        i != j && self.ids[i] == self.ids[j]
    }

    /// `(genuine, impostor)` scores over all ordered off-diagonal pairs.
    pub fn split_scores(&self) -> (Vec<f64>, Vec<f64>) {
        let mut genuine = Vec::new();
        let mut impostor = Vec::new();
        for i in 0..self.n {
            for j in 0..self.n {
                if i == j {
                    continue;
                }
                if self.ids[i] == self.ids[j] {
                    genuine.push(self.score(i, j));
                } else {
                    impostor.push(self.score(i, j));
                }
            }
        }
        (genuine, impostor)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub gar: f64,
}

/// Operating points ordered by decreasing threshold (so FAR and GAR are
/// non-decreasing along the list).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

/// ROC from raw genuine and impostor scores. Every distinct score is a
/// threshold; a comparison is accepted when its score is `>=` the threshold.
pub fn roc_from_scores(genuine: &[f64], impostor: &[f64]) -> Result<RocCurve> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Protocol(format!(
            "ROC needs genuine and impostor pairs, got {} and {}",
            genuine.len(),
            impostor.len()
        )));
    }
    let desc = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    };
    let g = desc(genuine);
    let im = desc(impostor);
    let mut thresholds: Vec<f64> = g.iter().chain(&im).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();

    let (ng, ni) = (g.len() as f64, im.len() as f64);
    let (mut gi, mut ii) = (0, 0);
    let points = thresholds
        .into_iter()
        .map(|t| {
            while gi < g.len() && g[gi] >= t {
                gi += 1;
            }
            while ii < im.len() && im[ii] >= t {
                ii += 1;
            }
            RocPoint {
                threshold: t,
                far: ii as f64 / ni,
                gar: gi as f64 / ng,
            }
        })
        .collect();
    Ok(RocCurve { points })
}

pub fn roc(sm: &ScoreMatrix) -> Result<RocCurve> {
    let (g, i) = sm.split_scores();
    roc_from_scores(&g, &i)
}

/// GAR at the lowest threshold whose FAR does not exceed `far_target`; 0 when
/// no threshold qualifies. No interpolation between operating points.
pub fn gar_at_far(curve: &RocCurve, far_target: f64) -> f64 {
    curve
        .points
        .iter()
        .take_while(|p| p.far <= far_target)
        .last()
        .map_or(0.0, |p| p.gar)
}

// ---------------------------------------------------------------------------
// two-stage defense

/// Detect-then-mitigate: images the detector flags are median filtered and
/// embedded with the plan's filters disabled; all others are embedded as is.
#[derive(Clone, Copy, Debug)]
pub struct Defense<'a> {
    pub detector: &'a DetectorModel,
    pub mean_reps: &'a MeanReps,
    pub plan: &'a MitigationPlan,
}

/// Outcome of running one image through the defense.
#[derive(Clone, Debug, PartialEq)]
pub struct DefendedEmbedding {
    pub embedding: Vec<f32>,
    pub score: f64,
    pub verdict: Verdict,
}

/// Detection plus the plain embedding, computed with one forward pass.
pub fn screen(model: &NetworkModel, det: &DetectorModel, mean_reps: &MeanReps, img: &Image) -> Result<DefendedEmbedding> {
    let out = forward(model, img, None)?;
    let f = features_from_acts(mean_reps, &out.acts);
    let score = det.score(&f)?;
    Ok(DefendedEmbedding {
        embedding: out.embedding,
        score,
        verdict: Verdict::from_score(score),
    })
}

pub fn defended_embedding(model: &NetworkModel, defense: &Defense<'_>, img: &Image) -> Result<DefendedEmbedding> {
    let mut d = screen(model, defense.detector, defense.mean_reps, img)?;
    if d.verdict == Verdict::Distorted {
        d.embedding = crate::mitigator::mitigate(model, defense.plan, img)?;
    }
    Ok(d)
}

/// All-vs-all scores of `images`, embedding each image exactly once.
pub fn score_matrix(model: &NetworkModel, images: &[(Image, u32)], defense: Option<&Defense<'_>>) -> Result<ScoreMatrix> {
    let embeddings = images
        .par_iter()
        .map(|(img, _)| match defense {
            Some(d) => defended_embedding(model, d, img).map(|e| e.embedding),
            None => embed(model, img, None),
        })
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<u32> = images.iter().map(|(_, id)| *id).collect();
    ScoreMatrix::from_embeddings(&embeddings, &ids)
}

// ---------------------------------------------------------------------------
// protocol

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Original,
    Distorted,
    Corrected,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Original => "original",
            Condition::Distorted => "distorted",
            Condition::Corrected => "corrected",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: Condition,
    pub distortion: String,
    pub gar_at_far: f64,
    pub far_target: f64,
    pub n_genuine: usize,
    pub n_impostor: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolReport {
    pub rows: Vec<ReportRow>,
    /// Indices of the images that were distorted.
    pub distorted_ids: Vec<usize>,
    /// Detector verdict per image in the corrected condition (empty when
    /// no defense ran).
    pub flagged: Vec<bool>,
}

impl ProtocolReport {
    pub fn gar(&self, condition: Condition) -> Option<f64> {
        self.rows.iter().find(|r| r.condition == condition).map(|r| r.gar_at_far)
    }
}

/// Render rows as CSV with fixed six-decimal metrics.
pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{},{},{}",
            r.condition.name(),
            r.distortion,
            r.gar_at_far,
            r.far_target,
            r.n_genuine,
            r.n_impostor,
            r.seed
        );
    }
    out
}

/// Corrupt the images selected by the protocol split; every image gets its
/// own child seed derived from its dataset index.
pub fn distort_selected(ds: &Dataset, spec: &DistortionSpec, selected: &[usize]) -> Result<Vec<Image>> {
    let mut images = ds.images();
    let distorted = selected
        .par_iter()
        .map(|&i| {
            let s = &ds.samples[i];
            apply(&spec.for_item(i as u64), &s.image, Some(&s.landmarks)).map(|(img, _)| img)
        })
        .collect::<Result<Vec<_>>>()?;
    for (&i, img) in selected.iter().zip(distorted) {
        images[i] = img;
    }
    Ok(images)
}

fn evaluate(
    condition: Condition,
    embeddings: &[Vec<f32>],
    ids: &[u32],
    distortion: &str,
    far_target: f64,
    seed: u64,
) -> Result<ReportRow> {
    let sm = ScoreMatrix::from_embeddings(embeddings, ids)?;
    let (g, i) = sm.split_scores();
    let curve = roc_from_scores(&g, &i)?;
    Ok(ReportRow {
        condition,
        distortion: distortion.to_string(),
        gar_at_far: gar_at_far(&curve, far_target),
        far_target,
        n_genuine: g.len(),
        n_impostor: i.len(),
        seed,
    })
}

/// Run the three-condition protocol on `ds`: original images, a
/// `fraction` of them corrupted by `spec`, and the same corrupted set passed
/// through the defense. The corrected row is emitted only when a defense is
/// given.
pub fn run_protocol(
    ds: &Dataset,
    model: &NetworkModel,
    spec: &DistortionSpec,
    defense: Option<&Defense<'_>>,
    fraction: f64,
    far_target: f64,
    seed: u64,
) -> Result<ProtocolReport> {
    if !(far_target > 0.0 && far_target < 1.0) {
        return Err(Error::Parameter(format!("FAR target must be in (0, 1), got {far_target}")));
    }
    let (_, to_distort) = split_protocol(ds, fraction, seed)?;
    let ids: Vec<u32> = ds.samples.iter().map(|s| s.subject_id).collect();
    let name = spec.kind().name();

    let original: Vec<Vec<f32>> = ds
        .samples
        .par_iter()
        .map(|s| embed(model, &s.image, None))
        .collect::<Result<_>>()?;
    let mut rows = vec![evaluate(Condition::Original, &original, &ids, name, far_target, seed)?];

    let corrupted = distort_selected(ds, spec, &to_distort)?;
    let mut distorted = original.clone();
    let fresh = to_distort
        .par_iter()
        .map(|&i| embed(model, &corrupted[i], None))
        .collect::<Result<Vec<_>>>()?;
    for (&i, e) in to_distort.iter().zip(fresh) {
        distorted[i] = e;
    }
    rows.push(evaluate(Condition::Distorted, &distorted, &ids, name, far_target, seed)?);

    let mut flagged = Vec::new();
    if let Some(d) = defense {
        let defended = corrupted
            .par_iter()
            .map(|img| defended_embedding(model, d, img))
            .collect::<Result<Vec<_>>>()?;
        flagged = defended.iter().map(|e| e.verdict == Verdict::Distorted).collect();
        let corrected: Vec<Vec<f32>> = defended.into_iter().map(|e| e.embedding).collect();
        rows.push(evaluate(Condition::Corrected, &corrected, &ids, name, far_target, seed)?);
    }
    Ok(ProtocolReport {
        rows,
        distorted_ids: to_distort,
        flagged,
    })
}

/// Median-filtered copies, used when the same images are mitigated under
/// many plans.
pub(crate) fn median_filtered(images: &[Image]) -> Result<Vec<Image>> {
    images.par_iter().map(|img| median_filter(img, MEDIAN_WINDOW)).collect()
}
