//! Command-line front end. Every subcommand maps onto one library
//! operation, reads its inputs from flags (or a JSON config, flags win) and
//! writes everything under `--out`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::detector::{
    batch_features, compute_mean_reps, load_mean_reps, save_mean_reps, train_detector_on_features, DetectorModel,
    MeanReps, Verdict, DEFAULT_C_GRID,
};
use crate::distortions::{apply, DistortionKind, DistortionRecord, DistortionSpec};
use crate::error::{Error, Result};
use crate::featnet::{default_network, embed, load_weights, NetworkModel};
use crate::image::{write_image, Image};
use crate::mitigator::{
    build_plan, compute_sensitivity, grid_search_plan, mitigate, MitigationPlan, SearchCase, SensitivityTable,
    DEFAULT_ETA_GRID, DEFAULT_KAPPA_GRID,
};
use crate::synthface::{
    generate_subjects, read_dataset, read_json, split_indices, write_dataset, write_json, Dataset, ManifestEntry,
    MANIFEST_NAME,
};
use crate::verifybench::{
    distort_selected, report_csv, roc_from_scores, run_protocol, Condition, Defense, ScoreMatrix,
    DEFAULT_FAR_TARGET,
};

pub const DEFAULT_NETWORK_SEED: u64 = 7;
pub const DEFAULT_FRACTION: f64 = 0.5;
const MEAN_REPS_FILE: &str = "mean_reps.bin";

/// Settings a JSON config may provide. Flags given on the command line take
/// precedence over these.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub network_seed: Option<u64>,
    pub distortion: Option<String>,
    pub detector: Option<PathBuf>,
    pub mean_reps: Option<PathBuf>,
    pub sensitivity: Option<PathBuf>,
    pub plan: Option<PathBuf>,
    pub c_grid: Option<Vec<f64>>,
    pub eta_grid: Option<Vec<usize>>,
    pub kappa_grid: Option<Vec<f64>>,
    pub far_target: Option<f64>,
    pub fraction: Option<f64>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Debug, Parser)]
#[command(name = "facerobust", version, about = "Face-image distortion, detection and mitigation toolkit")]
pub struct Cli {
    /// JSON file with default settings; flags override it
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Global seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// FNET1 weight file; defaults to the seeded default network
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Seed of the default network when no weight file is given
    #[arg(long)]
    pub network_seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic face dataset
    GenData {
        #[arg(long, default_value_t = 40)]
        subjects: usize,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Identifier of the first subject
        #[arg(long, default_value_t = 0)]
        first_subject: u32,
        #[command(flatten)]
        common: Common,
    },
    /// Apply a distortion to every image of a dataset
    Distort {
        /// Distortion kind or JSON spec file
        #[arg(long)]
        spec: Option<String>,
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Compute mean representations and embeddings of a clean dataset
    Extract {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a distortion detector
    TrainDetector {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Distortion kind or JSON spec file
        #[arg(long)]
        distortion: Option<String>,
        #[arg(long, value_delimiter = ',')]
        c_grid: Option<Vec<f64>>,
        #[command(flatten)]
        common: Common,
    },
    /// Score images with a trained detector
    Detect {
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long)]
        mean_reps: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Per-filter sensitivity from distorted/clean pairs
    Sensitivity {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        distortion: Option<String>,
        /// Use at most this many pairs
        #[arg(long)]
        pairs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Build a mitigation plan from fixed (eta, kappa) or by grid search
    BuildPlan {
        #[arg(long)]
        sensitivity: Option<PathBuf>,
        #[arg(long)]
        eta: Option<usize>,
        #[arg(long)]
        kappa: Option<f64>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        distortion: Option<String>,
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long)]
        mean_reps: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        eta_grid: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        kappa_grid: Option<Vec<f64>>,
        #[arg(long)]
        far: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Embed images under a mitigation plan
    Mitigate {
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the original / distorted / corrected verification protocol
    Evaluate {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        distortion: Option<String>,
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long)]
        mean_reps: Option<PathBuf>,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        far: Option<f64>,
        /// Fraction of images to corrupt
        #[arg(long)]
        fraction: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
}

/// Resolved settings of one invocation.
struct Ctx {
    cfg: RunConfig,
    common: Common,
}

impl Ctx {
    fn out(&self) -> Result<PathBuf> {
        let out = self
            .common
            .out
            .clone()
            .or_else(|| self.cfg.out.clone())
            .ok_or_else(|| Error::Usage("--out is required".into()))?;
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(out)
    }

    fn seed(&self) -> u64 {
        self.common.seed.or(self.cfg.seed).unwrap_or(0)
    }

    fn model(&self) -> Result<NetworkModel> {
        match self.common.weights.clone().or_else(|| self.cfg.weights.clone()) {
            Some(p) => load_weights(existing("--weights", &p)?),
            None => Ok(default_network(
                self.common.network_seed.or(self.cfg.network_seed).unwrap_or(DEFAULT_NETWORK_SEED),
            )),
        }
    }

    fn dataset(&self, flag: Option<&PathBuf>) -> Result<Dataset> {
        let dir = required("--dataset", flag.cloned().or_else(|| self.cfg.dataset.clone()))?;
        existing("--dataset", &dir.join(MANIFEST_NAME))?;
        read_dataset(&dir, self.seed())
    }

    fn distortion(&self, flag: &str, value: Option<&String>) -> Result<DistortionSpec> {
        let v = required(flag, value.cloned().or_else(|| self.cfg.distortion.clone()))?;
        parse_distortion(flag, &v, self.seed())
    }

    fn path(&self, flag: &str, value: Option<&PathBuf>, fallback: &Option<PathBuf>) -> Result<PathBuf> {
        let p = required(flag, value.cloned().or_else(|| fallback.clone()))?;
        existing(flag, &p)?;
        Ok(p)
    }

    fn far(&self, flag: Option<f64>) -> Result<f64> {
        let far = flag.or(self.cfg.far_target).unwrap_or(DEFAULT_FAR_TARGET);
        if !(far > 0.0 && far < 1.0) {
            return Err(Error::Usage(format!("--far must be in (0, 1), got {far}")));
        }
        Ok(far)
    }
}

fn required<T>(flag: &str, v: Option<T>) -> Result<T> {
    v.ok_or_else(|| Error::Usage(format!("{flag} is required")))
}

fn existing<'a>(flag: &str, p: &'a Path) -> Result<&'a Path> {
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::Usage(format!("{flag}: {} does not exist", p.display())))
    }
}

/// A kind name (`grids`, `xmsb`, ...) with default parameters and `seed`, or
/// the path of a JSON spec.
fn parse_distortion(flag: &str, v: &str, seed: u64) -> Result<DistortionSpec> {
    let spec = match v.parse::<DistortionKind>() {
        Ok(kind) => DistortionSpec::default_for(kind, seed),
        Err(_) => read_json(existing(flag, Path::new(v))?)?,
    };
    spec.validate()?;
    Ok(spec)
}

/// Mean representations named by the flag, or stored next to the detector.
fn detector_mean_reps(detector_path: &Path, det: &DetectorModel, flag: Option<&PathBuf>) -> Result<MeanReps> {
    if let Some(p) = flag {
        return load_mean_reps(existing("--mean-reps", p)?);
    }
    let name = det.mean_reps_path.as_deref().unwrap_or(MEAN_REPS_FILE);
    let dir = detector_path.parent().unwrap_or(Path::new("."));
    load_mean_reps(existing("--mean-reps", &dir.join(name))?)
}

fn embeddings_csv(paths: &[String], embeddings: &[Vec<f32>]) -> String {
    let mut out = String::from("path");
    let dim = embeddings.first().map_or(0, Vec::len);
    for k in 0..dim {
        let _ = write!(out, ",e{k}");
    }
    out.push('\n');
    for (p, e) in paths.iter().zip(embeddings) {
        out.push_str(p);
        for v in e {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn sample_paths(ds: &Dataset) -> Vec<String> {
    ds.samples
        .iter()
        .map(|s| crate::synthface::sample_file_name(s.subject_id, s.sample_index))
        .collect()
}

fn par_embed(model: &NetworkModel, images: &[Image]) -> Result<Vec<Vec<f32>>> {
    use rayon::prelude::*;
    images.par_iter().map(|img| embed(model, img, None)).collect()
}

/// Clean half for the mean representations and the negative class; the
/// other half is distorted for the positive class.
fn detector_training_sets(ds: &Dataset, spec: &DistortionSpec, seed: u64) -> Result<(Vec<Image>, Vec<Image>)> {
    let (clean_idx, dist_idx) = split_indices(ds.len(), 0.5, seed)?;
    let clean = clean_idx.iter().map(|&i| ds.samples[i].image.clone()).collect();
    let corrupted = distort_selected(ds, spec, &dist_idx)?;
    let distorted = dist_idx.iter().map(|&i| corrupted[i].clone()).collect();
    Ok((clean, distorted))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => read_json(existing("--config", p)?)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::GenData {
            subjects,
            samples,
            size,
            first_subject,
            common,
        } => {
            let ctx = Ctx { cfg, common };
            let ds = generate_subjects(first_subject, subjects, samples, size, ctx.seed())?;
            let written = write_dataset(&ds, ctx.out()?)?;
            log::info!("wrote {} files", written.len());
        }
        Command::Distort { spec, input, common } => {
            let ctx = Ctx { cfg, common };
            let spec = ctx.distortion("--spec", spec.as_ref())?;
            let dir = required("--in", input.or_else(|| ctx.cfg.dataset.clone()))?;
            let manifest: Vec<ManifestEntry> = read_json(existing("--in", &dir.join(MANIFEST_NAME))?)?;
            let ds = read_dataset(&dir, ctx.seed())?;
            let out = ctx.out()?;
            #[derive(Serialize)]
            struct Entry<'a> {
                path: &'a str,
                record: DistortionRecord,
            }
            let mut records = Vec::with_capacity(ds.len());
            for (i, (s, m)) in ds.samples.iter().zip(&manifest).enumerate() {
                let (img, record) = apply(&spec.for_item(i as u64), &s.image, Some(&s.landmarks))?;
                write_image(&img, out.join(&m.path))?;
                records.push(Entry { path: &m.path, record });
            }
            write_json(&out.join(MANIFEST_NAME), &manifest)?;
            write_json(&out.join("records.json"), &records)?;
        }
        Command::Extract { dataset, common } => {
            let ctx = Ctx { cfg, common };
            let ds = ctx.dataset(dataset.as_ref())?;
            let model = ctx.model()?;
            let out = ctx.out()?;
            let images = ds.images();
            save_mean_reps(&compute_mean_reps(&model, &images)?, out.join(MEAN_REPS_FILE))?;
            write_text(
                &out.join("embeddings.csv"),
                &embeddings_csv(&sample_paths(&ds), &par_embed(&model, &images)?),
            )?;
        }
        Command::TrainDetector {
            dataset,
            distortion,
            c_grid,
            common,
        } => {
            let ctx = Ctx { cfg, common };
            let ds = ctx.dataset(dataset.as_ref())?;
            let spec = ctx.distortion("--distortion", distortion.as_ref())?;
            let c_grid = c_grid.or_else(|| ctx.cfg.c_grid.clone()).unwrap_or(DEFAULT_C_GRID.to_vec());
            let model = ctx.model()?;
            let out = ctx.out()?;
            let (clean, distorted) = detector_training_sets(&ds, &spec, ctx.seed())?;
            let mean_reps = compute_mean_reps(&model, &clean)?;
            let cf = batch_features(&model, &mean_reps, &clean)?;
            let df = batch_features(&model, &mean_reps, &distorted)?;
            let mut det = train_detector_on_features(&cf, &df, &c_grid, ctx.seed())?;
            det.mean_reps_path = Some(MEAN_REPS_FILE.into());
            save_mean_reps(&mean_reps, out.join(MEAN_REPS_FILE))?;
            write_json(&out.join("detector.json"), &det)?;
        }
        Command::Detect {
            detector,
            mean_reps,
            dataset,
            common,
        } => {
            let ctx = Ctx { cfg, common };
            let det_path = ctx.path("--detector", detector.as_ref(), &ctx.cfg.detector)?;
            let det: DetectorModel = read_json(&det_path)?;
            let reps = detector_mean_reps(&det_path, &det, mean_reps.as_ref().or(ctx.cfg.mean_reps.as_ref()))?;
            let ds = ctx.dataset(dataset.as_ref())?;
            let model = ctx.model()?;
            let feats = batch_features(&model, &reps, &ds.images())?;
            let mut csv = String::from("path,score,verdict\n");
            for (p, f) in sample_paths(&ds).iter().zip(&feats) {
                let score = det.score(f)?;
                let verdict = match Verdict::from_score(score) {
                    Verdict::Clean => "clean",
                    Verdict::Distorted => "distorted",
                };
                let _ = writeln!(csv, "{p},{score:.6},{verdict}");
            }
            write_text(&ctx.out()?.join("detections.csv"), &csv)?;
        }
        Command::Sensitivity {
            dataset,
            distortion,
            pairs,
            common,
        } => {
            let ctx = Ctx { cfg, common };
            let ds = ctx.dataset(dataset.as_ref())?;
            let spec = ctx.distortion("--distortion", distortion.as_ref())?;
            let model = ctx.model()?;
            let n = pairs.unwrap_or(ds.len()).min(ds.len());
            let idx: Vec<usize> = (0..n).collect();
            let corrupted = distort_selected(&ds, &spec, &idx)?;
            let pairs: Vec<(Image, Image)> = idx
                .iter()
                .map(|&i| (corrupted[i].clone(), ds.samples[i].image.clone()))
                .collect();
            compute_sensitivity(&model, &pairs)?.save(ctx.out()?.join("sensitivity.json"))?;
        }
        Command::BuildPlan {
            sensitivity,
            eta,
            kappa,
            dataset,
            distortion,
            detector,
            mean_reps,
            eta_grid,
            kappa_grid,
            far,
            common,
        } => {
            let ctx = Ctx { cfg, common };
            let table = SensitivityTable::load(ctx.path("--sensitivity", sensitivity.as_ref(), &ctx.cfg.sensitivity)?)?;
            let out = ctx.out()?;
            let plan = match (eta, kappa) {
                (Some(eta), Some(kappa)) => build_plan(&table, eta, kappa)?,
                (None, None) => {
                    let ds = ctx.dataset(dataset.as_ref())?;
                    let spec = ctx.distortion("--distortion", distortion.as_ref())?;
                    let det_path = ctx.path("--detector", detector.as_ref(), &ctx.cfg.detector)?;
                    let det: DetectorModel = read_json(&det_path)?;
                    let reps =
                        detector_mean_reps(&det_path, &det, mean_reps.as_ref().or(ctx.cfg.mean_reps.as_ref()))?;
                    let eta_grid = eta_grid.or_else(|| ctx.cfg.eta_grid.clone()).unwrap_or(DEFAULT_ETA_GRID.to_vec());
                    let kappa_grid =
                        kappa_grid.or_else(|| ctx.cfg.kappa_grid.clone()).unwrap_or(DEFAULT_KAPPA_GRID.to_vec());
                    let search = grid_search_plan(
                        &ctx.model()?,
                        &table,
                        &reps,
                        &ds,
                        &[SearchCase { spec: &spec, detector: &det }],
                        &eta_grid,
                        &kappa_grid,
                        ctx.far(far)?,
                        ctx.seed(),
                    )?;
                    let mut csv = String::from("eta,kappa,mean_gar\n");
                    for r in &search.results {
                        let _ = writeln!(csv, "{},{},{:.6}", r.eta, r.kappa, r.mean_gar);
                    }
                    write_text(&out.join("grid.csv"), &csv)?;
                    search.plan
                }
                _ => return Err(Error::Usage("--eta and --kappa must be given together".into())),
            };
            plan.save(out.join("plan.json"))?;
        }
        Command::Mitigate { plan, dataset, common } => {
            use rayon::prelude::*;
            let ctx = Ctx { cfg, common };
            let plan = MitigationPlan::load(ctx.path("--plan", plan.as_ref(), &ctx.cfg.plan)?)?;
            let ds = ctx.dataset(dataset.as_ref())?;
            let model = ctx.model()?;
            let embeddings = ds
                .samples
                .par_iter()
                .map(|s| mitigate(&model, &plan, &s.image))
                .collect::<Result<Vec<_>>>()?;
            write_text(&ctx.out()?.join("embeddings.csv"), &embeddings_csv(&sample_paths(&ds), &embeddings))?;
        }
        Command::Evaluate {
            dataset,
            distortion,
            detector,
            mean_reps,
            plan,
            far,
            fraction,
            common,
        } => {
            let ctx = Ctx { cfg, common };
            let ds = ctx.dataset(dataset.as_ref())?;
            let spec = ctx.distortion("--distortion", distortion.as_ref())?;
            let far = ctx.far(far)?;
            let fraction = fraction.or(ctx.cfg.fraction).unwrap_or(DEFAULT_FRACTION);
            let model = ctx.model()?;
            let detector = detector.or_else(|| ctx.cfg.detector.clone());
            let plan = plan.or_else(|| ctx.cfg.plan.clone());
            let defense_parts = match (detector, plan) {
                (Some(d), Some(p)) => {
                    let det: DetectorModel = read_json(existing("--detector", &d)?)?;
                    let reps = detector_mean_reps(&d, &det, mean_reps.as_ref().or(ctx.cfg.mean_reps.as_ref()))?;
                    let plan = MitigationPlan::load(existing("--plan", &p)?)?;
                    Some((det, reps, plan))
                }
                (None, None) => None,
                _ => return Err(Error::Usage("--detector and --plan must be given together".into())),
            };
            let defense = defense_parts.as_ref().map(|(det, reps, plan)| Defense {
                detector: det,
                mean_reps: reps,
                plan,
            });
            let report = run_protocol(&ds, &model, &spec, defense.as_ref(), fraction, far, ctx.seed())?;
            let out = ctx.out()?;
            write_text(&out.join("report.csv"), &report_csv(&report.rows))?;
            roc_files(&ds, &model, &spec, defense.as_ref(), fraction, ctx.seed(), &out)?;
        }
    }
    Ok(())
}

/// gnuplot-ready `far gar threshold` columns for each condition.
fn roc_files(
    ds: &Dataset,
    model: &NetworkModel,
    spec: &DistortionSpec,
    defense: Option<&Defense<'_>>,
    fraction: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    use rayon::prelude::*;
    let ids: Vec<u32> = ds.samples.iter().map(|s| s.subject_id).collect();
    let (_, selected) = split_indices(ds.len(), fraction, seed)?;
    let corrupted = distort_selected(ds, spec, &selected)?;
    let mut conditions = vec![
        (Condition::Original, par_embed(model, &ds.images())?),
        (Condition::Distorted, par_embed(model, &corrupted)?),
    ];
    if let Some(d) = defense {
        let e = corrupted
            .par_iter()
            .map(|img| crate::verifybench::defended_embedding(model, d, img).map(|x| x.embedding))
            .collect::<Result<Vec<_>>>()?;
        conditions.push((Condition::Corrected, e));
    }
    for (cond, embeddings) in conditions {
        let (g, i) = ScoreMatrix::from_embeddings(&embeddings, &ids)?.split_scores();
        let curve = roc_from_scores(&g, &i)?;
        let mut text = format!("# far gar threshold ({} {})\n", cond.name(), spec.kind());
        for p in &curve.points {
            let _ = writeln!(text, "{:.6} {:.6} {:.6}", p.far, p.gar, p.threshold);
        }
        write_text(&out.join(format!("roc_{}.dat", cond.name())), &text)?;
    }
    Ok(())
}

/// Parse arguments, run, and map the outcome to a process exit code:
/// 0 success, 1 usage error, 2 data or format error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                1
            } else {
                2
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_subcommand() {
        for args in [
            vec!["facerobust", "gen-data", "--subjects", "2", "--out", "x"],
            vec!["facerobust", "distort", "--spec", "grids", "--in", "a", "--out", "b"],
            vec!["facerobust", "extract", "--dataset", "a", "--out", "b"],
            vec!["facerobust", "train-detector", "--dataset", "a", "--distortion", "ero", "--c-grid", "0.1,1"],
            vec!["facerobust", "detect", "--detector", "d.json", "--dataset", "a"],
            vec!["facerobust", "sensitivity", "--dataset", "a", "--distortion", "beard", "--pairs", "5"],
            vec!["facerobust", "build-plan", "--sensitivity", "s.json", "--eta", "1", "--kappa", "0.5"],
            vec!["facerobust", "mitigate", "--plan", "p.json", "--dataset", "a"],
            vec!["facerobust", "evaluate", "--dataset", "a", "--distortion", "xmsb", "--far", "0.01"],
        ] {
            assert!(Cli::try_parse_from(&args).is_ok(), "{args:?}");
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(main_with_args(["facerobust", "gen-data", "--bogus"]), 1);
        assert_eq!(main_with_args(["facerobust", "mitigate", "--plan", "/nonexistent/plan.json", "--out", "x"]), 1);
        assert_eq!(main_with_args(["facerobust", "--help"]), 0);

        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.json");
        fs::write(&bad, "{ not json").unwrap();
        let out = dir.path().join("o");
        let code = main_with_args([
            "facerobust",
            "build-plan",
            "--sensitivity",
            bad.to_str().unwrap(),
            "--eta",
            "1",
            "--kappa",
            "0.1",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn distortion_argument() {
        assert_eq!(parse_distortion("--d", "fhbo", 0).unwrap(), DistortionSpec::Fhbo);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        fs::write(&p, r#"{"kind":"xmsb","phi":[0.1,0.1,0.1],"seed":3}"#).unwrap();
        assert_eq!(
            parse_distortion("--d", p.to_str().unwrap(), 0).unwrap(),
            DistortionSpec::Xmsb { phi: [0.1; 3], seed: 3 }
        );
        assert!(matches!(parse_distortion("--d", "nope", 0), Err(Error::Usage(_))));
    }

    fn run_ok(args: &[&str]) {
        let mut full = vec!["facerobust"];
        full.extend_from_slice(args);
        assert_eq!(main_with_args(&full), 0, "{args:?}");
    }

    fn count_ext(dir: &Path, ext: &str) -> usize {
        fs::read_dir(dir)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext))
            .count()
    }

    #[test]
    fn gen_data_count_contract() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("d");
        run_ok(&["gen-data", "--subjects", "40", "--samples", "10", "--size", "64", "--seed", "7", "--out", d.to_str().unwrap()]);
        assert_eq!(count_ext(&d, "pgm"), 400);
        assert!(d.join(MANIFEST_NAME).exists());
    }

    #[test]
    fn pipeline_contracts() {
        let dir = tempfile::tempdir().unwrap();
        let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
        let (d, dx, out) = (p("d"), p("dx"), p("out"));
        run_ok(&["gen-data", "--subjects", "6", "--samples", "4", "--seed", "1", "--out", &d]);

        let spec = p("xmsb.json");
        fs::write(&spec, r#"{"kind":"xmsb","phi":[0.03,0.05,0.1],"seed":4}"#).unwrap();
        run_ok(&["distort", "--spec", &spec, "--in", &d, "--out", &dx]);
        assert_eq!(count_ext(Path::new(&dx), "pgm"), 24);
        let records: Vec<serde_json::Value> = read_json(Path::new(&dx).join("records.json")).unwrap();
        assert_eq!(records.len(), 24);
        assert_eq!(read_dataset(&d, 0).unwrap().len(), read_dataset(&dx, 0).unwrap().len());

        run_ok(&["train-detector", "--dataset", &d, "--distortion", "grids", "--seed", "2", "--out", &out]);
        run_ok(&["sensitivity", "--dataset", &d, "--distortion", "grids", "--pairs", "8", "--out", &out]);
        let sens = format!("{out}/sensitivity.json");
        run_ok(&["build-plan", "--sensitivity", &sens, "--eta", "1", "--kappa", "0.25", "--out", &out]);
        let (det, plan) = (format!("{out}/detector.json"), format!("{out}/plan.json"));
        run_ok(&["detect", "--detector", &det, "--dataset", &dx, "--out", &out]);
        run_ok(&["mitigate", "--plan", &plan, "--dataset", &dx, "--out", &out]);
        run_ok(&[
            "evaluate", "--dataset", &d, "--distortion", "grids", "--detector", &det, "--plan", &plan, "--far", "0.01",
            "--out", &out,
        ]);
        let report = fs::read_to_string(format!("{out}/report.csv")).unwrap();
        let lines: Vec<&str> = report.lines().collect();
        assert_eq!(lines[0], crate::verifybench::CSV_HEADER);
        assert_eq!(lines.len(), 4);
        for (line, cond) in lines[1..].iter().zip(["original", "distorted", "corrected"]) {
            assert!(line.starts_with(&format!("{cond},grids,")), "{line}");
        }
        assert!(Path::new(&format!("{out}/roc_corrected.dat")).exists());
        assert_eq!(fs::read_to_string(format!("{out}/detections.csv")).unwrap().lines().count(), 25);

        // config supplies what the flags leave out
        let cfg = p("cfg.json");
        fs::write(&cfg, format!(r#"{{"dataset":"{d}","distortion":"ero","seed":5}}"#)).unwrap();
        let out2 = p("out2");
        run_ok(&["evaluate", "--config", &cfg, "--out", &out2]);
        let report = fs::read_to_string(format!("{out2}/report.csv")).unwrap();
        assert!(report.lines().nth(1).unwrap().starts_with("original,ero,"));
        assert!(report.trim_end().ends_with(",5"));
    }

    #[test]
    fn config_fields_are_checked() {
        let cfg: RunConfig = serde_json::from_str(r#"{"far_target":0.05,"seed":9}"#).unwrap();
        assert_eq!(cfg.seed, Some(9));
        assert!(serde_json::from_str::<RunConfig>(r#"{"unknown":1}"#).is_err());
    }
}
