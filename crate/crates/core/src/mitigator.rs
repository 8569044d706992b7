//! Selective dropout: per-filter distortion sensitivity, plans that disable
//! the most sensitive filters, and the (η, κ) grid search.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{DetectorModel, MeanReps, Verdict};
use crate::distortions::DistortionSpec;
use crate::error::{Error, Result};
use crate::featnet::{embed, forward_trace, FilterMask, NetworkModel};
use crate::image::{median_filter, Image};
use crate::synthface::{read_json, split_protocol, write_json, Dataset};
use crate::verifybench::{distort_selected, gar_at_far, median_filtered, roc_from_scores, screen, ScoreMatrix};

pub const MEDIAN_WINDOW: usize = 5;
pub const DEFAULT_ETA_GRID: [usize; 3] = [1, 2, 3];
pub const DEFAULT_KAPPA_GRID: [f64; 3] = [0.1, 0.25, 0.5];

/// ε per conv layer and filter, summed over distorted/clean pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTable {
    /// Model layer index of each conv layer, in network order.
    pub layers: Vec<usize>,
    pub eps: Vec<Vec<f64>>,
    pub layer_agg: Vec<f64>,
    pub n_dis: usize,
}

impl SensitivityTable {
    /// Build from raw ε rows, filling in the per-layer sums.
    pub fn from_eps(layers: Vec<usize>, eps: Vec<Vec<f64>>, n_dis: usize) -> Result<Self> {
        if layers.len() != eps.len() {
            return Err(Error::Shape(format!("{} layer indices for {} ε rows", layers.len(), eps.len())));
        }
        if eps.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data("sensitivity values must be finite and non-negative".into()));
        }
        let layer_agg = eps.iter().map(|row| row.iter().sum()).collect();
        Ok(SensitivityTable {
            layers,
            eps,
            layer_agg,
            n_dis,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let t: SensitivityTable = read_json(path)?;
        Self::from_eps(t.layers, t.eps, t.n_dis)
    }
}

fn pair_norms(model: &NetworkModel, distorted: &Image, clean: &Image) -> Result<Vec<Vec<f64>>> {
    let d = forward_trace(model, distorted, None)?;
    let c = forward_trace(model, clean, None)?;
    Ok(d.conv_responses
        .iter()
        .zip(&c.conv_responses)
        .map(|(rd, rc)| {
            (0..rd.shape.0)
                .map(|j| {
                    rd.channel(j)
                        .iter()
                        .zip(rc.channel(j))
                        .map(|(&a, &b)| {
                            let diff = a as f64 - b as f64;
                            diff * diff
                        })
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect())
}

fn add_into(acc: &mut [Vec<f64>], other: &[Vec<f64>]) {
    for (a, o) in acc.iter_mut().zip(other) {
        for (x, y) in a.iter_mut().zip(o) {
            *x += y;
        }
    }
}

/// ε_ij = Σ_k ‖φ_ij(distorted_k) − φ_ij(clean_k)‖₂ over post-ReLU responses.
/// Per-pair norms are summed in pair order, so the result does not depend
/// on the thread count.
pub fn compute_sensitivity(model: &NetworkModel, pairs: &[(Image, Image)]) -> Result<SensitivityTable> {
    if pairs.is_empty() {
        return Err(Error::Parameter("sensitivity needs at least one image pair".into()));
    }
    let norms = pairs
        .par_iter()
        .map(|(d, c)| pair_norms(model, d, c))
        .collect::<Result<Vec<_>>>()?;
    let mut eps = norms[0].clone();
    for n in &norms[1..] {
        add_into(&mut eps, n);
    }
    SensitivityTable::from_eps(model.conv_layers(), eps, pairs.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MitigationPlan {
    pub eta: usize,
    pub kappa: f64,
    pub mask: FilterMask,
    #[serde(default = "default_true")]
    pub use_median_filter: bool,
}

fn default_true() -> bool {
    true
}

impl MitigationPlan {
    /// Disables nothing and skips the median filter.
    pub fn identity() -> Self {
        MitigationPlan {
            eta: 0,
            kappa: 0.0,
            mask: FilterMask::empty(),
            use_median_filter: false,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let plan: MitigationPlan = read_json(path)?;
        if !(0.0..=1.0).contains(&plan.kappa) {
            return Err(Error::Data(format!("plan kappa {} outside [0, 1]", plan.kappa)));
        }
        Ok(plan)
    }
}

/// Number of filters κ selects out of `n`; any κ > 0 selects at least one.
pub fn kappa_count(kappa: f64, n: usize) -> usize {
    if kappa <= 0.0 {
        return 0;
    }
    // guard against 0.1 * 30 = 3.0000000000000004 rounding up to 4
    let raw = kappa * n as f64;
    let count = if (raw - raw.round()).abs() < 1e-9 { raw.round() } else { raw.ceil() };
    (count as usize).clamp(1, n)
}

fn ranked_desc(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// Disable the ⌈κ·filters⌉ most sensitive filters in each of the η layers
/// with the largest aggregate sensitivity. Ties go to the smaller index.
pub fn build_plan(table: &SensitivityTable, eta: usize, kappa: f64) -> Result<MitigationPlan> {
    let n_layers = table.eps.len();
    if eta == 0 || eta > n_layers {
        return Err(Error::Parameter(format!("eta must be in 1..={n_layers}, got {eta}")));
    }
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::Parameter(format!("kappa must be in [0, 1], got {kappa}")));
    }
    let mut mask = FilterMask::empty();
    for &li in ranked_desc(&table.layer_agg).iter().take(eta) {
        let row = &table.eps[li];
        for &f in ranked_desc(row).iter().take(kappa_count(kappa, row.len())) {
            mask.disabled.insert((table.layers[li], f));
        }
    }
    Ok(MitigationPlan {
        eta,
        kappa,
        mask,
        use_median_filter: true,
    })
}

/// Embedding of `img` under the plan: optional 5×5 median filter, then a
/// forward pass with the plan's filters disabled.
pub fn mitigate(model: &NetworkModel, plan: &MitigationPlan, img: &Image) -> Result<Vec<f32>> {
    if plan.use_median_filter {
        embed(model, &median_filter(img, MEDIAN_WINDOW)?, Some(&plan.mask))
    } else {
        embed(model, img, Some(&plan.mask))
    }
}

/// One distortion the grid search optimizes for, with the detector that
/// guards against it.
#[derive(Clone, Copy, Debug)]
pub struct SearchCase<'a> {
    pub spec: &'a DistortionSpec,
    pub detector: &'a DetectorModel,
}

/// Training-set GAR of one candidate plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub eta: usize,
    pub kappa: f64,
    pub mean_gar: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSearchOutcome {
    pub plan: MitigationPlan,
    pub results: Vec<GridResult>,
}

/// Per-case state that does not depend on the plan.
struct Prepared {
    ids: Vec<u32>,
    base: Vec<Vec<f32>>,
    flagged: Vec<usize>,
    filtered: Vec<Image>,
}

fn prepare(
    model: &NetworkModel,
    mean_reps: &MeanReps,
    ds: &Dataset,
    case: &SearchCase<'_>,
    fraction: f64,
    seed: u64,
) -> Result<Prepared> {
    let (_, selected) = split_protocol(ds, fraction, seed)?;
    let corrupted = distort_selected(ds, case.spec, &selected)?;
    let screened = corrupted
        .par_iter()
        .map(|img| screen(model, case.detector, mean_reps, img))
        .collect::<Result<Vec<_>>>()?;
    let flagged: Vec<usize> = (0..screened.len())
        .filter(|&i| screened[i].verdict == Verdict::Distorted)
        .collect();
    let to_filter: Vec<Image> = flagged.iter().map(|&i| corrupted[i].clone()).collect();
    Ok(Prepared {
        ids: ds.samples.iter().map(|s| s.subject_id).collect(),
        base: screened.into_iter().map(|s| s.embedding).collect(),
        flagged,
        filtered: median_filtered(&to_filter)?,
    })
}

fn plan_gar(model: &NetworkModel, p: &Prepared, plan: &MitigationPlan, far_target: f64) -> Result<f64> {
    let fixed = p
        .filtered
        .par_iter()
        .map(|img| embed(model, img, Some(&plan.mask)))
        .collect::<Result<Vec<_>>>()?;
    let mut embeddings = p.base.clone();
    for (&i, e) in p.flagged.iter().zip(fixed) {
        embeddings[i] = e;
    }
    let (g, im) = ScoreMatrix::from_embeddings(&embeddings, &p.ids)?.split_scores();
    Ok(gar_at_far(&roc_from_scores(&g, &im)?, far_target))
}

/// Evaluate every (η, κ) on a corrupted copy of `train` through the
/// detect-then-mitigate pipeline and keep the plan with the best mean GAR.
/// Ties prefer smaller κ, then smaller η.
#[allow(clippy::too_many_arguments)]
pub fn grid_search_plan(
    model: &NetworkModel,
    table: &SensitivityTable,
    mean_reps: &MeanReps,
    train: &Dataset,
    cases: &[SearchCase<'_>],
    eta_grid: &[usize],
    kappa_grid: &[f64],
    far_target: f64,
    seed: u64,
) -> Result<GridSearchOutcome> {
    if eta_grid.is_empty() || kappa_grid.is_empty() {
        return Err(Error::Parameter("eta and kappa grids must be non-empty".into()));
    }
    if cases.is_empty() {
        return Err(Error::Parameter("grid search needs at least one distortion".into()));
    }
    if train.n_subjects() < 2 {
        return Err(Error::Protocol("grid search needs at least two subjects".into()));
    }
    let prepared = cases
        .iter()
        .map(|c| prepare(model, mean_reps, train, c, 0.5, seed))
        .collect::<Result<Vec<_>>>()?;

    let mut candidates = Vec::new();
    for &eta in eta_grid {
        for &kappa in kappa_grid {
            candidates.push(build_plan(table, eta, kappa)?);
        }
    }
    // least intervention first, so a strict improvement is needed to move on
    candidates.sort_by(|a, b| a.kappa.total_cmp(&b.kappa).then(a.eta.cmp(&b.eta)));

    let mut results = Vec::with_capacity(candidates.len());
    let mut best: Option<(f64, usize)> = None;
    for (k, plan) in candidates.iter().enumerate() {
        let mut total = 0.0;
        for p in &prepared {
            total += plan_gar(model, p, plan, far_target)?;
        }
        let mean_gar = total / prepared.len() as f64;
        log::debug!("eta={} kappa={} mean GAR {:.4}", plan.eta, plan.kappa, mean_gar);
        results.push(GridResult {
            eta: plan.eta,
            kappa: plan.kappa,
            mean_gar,
        });
        if best.is_none_or(|(g, _)| mean_gar > g) {
            best = Some((mean_gar, k));
        }
    }
    let (_, k) = best.expect("grids are non-empty");
    Ok(GridSearchOutcome {
        plan: candidates.swap_remove(k),
        results,
    })
}
