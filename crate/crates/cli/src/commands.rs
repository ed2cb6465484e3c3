//! Subcommand implementations.

use std::path::{Path, PathBuf};

use geomatch::assignment::{estimate_scale, external_directional, proposals_from_external};
use geomatch::container;
use geomatch::covisible::mask_to_pgm;
use geomatch::dataset::{self, write_atomic, LoadedPair};
use geomatch::features::{FeatureGrid, COARSE_STRIDE, FINE_STRIDE};
use geomatch::geometry::{essential_from_pose, relative_pose};
use geomatch::metrics::{
    aggregate, corner_error, epipolar_precision, mma, pose_errors, pose_from_matches, ransac_homography,
    EvalReport, PairRecord, RansacConfig, EPIPOLAR_PRECISION_THRESHOLD, MMA_THRESHOLDS,
};
use geomatch::model::ModelWeights;
use geomatch::pipeline::{Matcher, PairInput};
use geomatch::refine::{refine_matches, RefineConfig};
use geomatch::synthscene::{PairGeometry, PairMeta, ScaleBucket};
use nalgebra::Point2;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::csvio::{coarse_csv, read_points, refined_csv};
use crate::error::{CliError, CliResult};
use crate::svg::{cumulative_curve, line_plot};

fn io_at(path: &Path) -> impl Fn(geomatch::Error) -> CliError + '_ {
    move |e| CliError::from_input(&path.display().to_string(), e)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    write_atomic(path, bytes).map_err(io_at(path))
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serialisable");
    out.push(b'\n');
    out
}

fn pool(workers: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

/// Loads weights from the configured file, or seeds them.
pub fn load_weights(cfg: &RunConfig) -> CliResult<ModelWeights> {
    match (&cfg.weights, cfg.seed) {
        (Some(path), _) => ModelWeights::load(path).map_err(io_at(path)),
        (None, Some(seed)) => Ok(ModelWeights::seeded(seed, cfg.attention)),
        (None, None) => Err(CliError::Config("no weights file and no seed for initialisation".into())),
    }
}

pub fn cmd_gen(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    cfg.validate()?;
    let out = cfg.output_dir()?;
    let mut gen = cfg.generate.clone();
    if let Some(seed) = cfg.seed {
        gen.seed = seed;
    }
    dataset::generate_dataset(&out, &gen).map_err(io_at(&out))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairSummary {
    pub pair: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub proposals: usize,
    pub filtered: usize,
    pub refined: usize,
    pub discarded: usize,
    pub s0: f64,
    pub s1: f64,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchSummary {
    pub pairs: Vec<PairSummary>,
    pub failed: usize,
}

fn match_one(matcher: &Matcher, pair: &LoadedPair, out: &Path) -> CliResult<PairSummary> {
    let output = matcher
        .match_pair(&PairInput {
            coarse_a: &pair.coarse_a,
            coarse_b: &pair.coarse_b,
            fine_a: &pair.fine_a,
            fine_b: &pair.fine_b,
            labels: pair.labels.as_ref(),
            geometry: Some(&pair.geometry),
            seed: pair.meta.seed,
        })
        .map_err(|e| CliError::Config(e.to_string()))?;
    let dir = out.join(&pair.name);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    write_file(&dir.join("coarse.csv"), &coarse_csv(&output.filtered, &pair.coarse_a, &pair.coarse_b))?;
    let final_csv = match &output.refined {
        Some(r) => refined_csv(&r.matches),
        None => coarse_csv(&output.filtered, &pair.coarse_a, &pair.coarse_b),
    };
    write_file(&dir.join("matches.csv"), &final_csv)?;
    if let Some(losses) = &output.losses {
        write_file(&dir.join("loss.json"), &json(losses))?;
    }
    let pgm = |mask: &[bool], g: &FeatureGrid| {
        mask_to_pgm(mask, g.width(), g.height()).map_err(|e| CliError::Format(e.to_string()))
    };
    write_file(&dir.join("maskA.pgm"), &pgm(&output.covisible.mask_a, &pair.coarse_a)?)?;
    write_file(&dir.join("maskB.pgm"), &pgm(&output.covisible.mask_b, &pair.coarse_b)?)?;
    let (refined, discarded) = output.refined.as_ref().map_or((0, 0), |r| (r.matches.len(), r.discarded));
    Ok(PairSummary {
        pair: pair.name.clone(),
        ok: true,
        error: None,
        proposals: output.proposals.len(),
        filtered: output.filtered.len(),
        refined,
        discarded,
        s0: output.scale.s0,
        s1: output.scale.s1,
        index: output.scale.index,
    })
}

fn failed_summary(name: String, e: &CliError) -> PairSummary {
    PairSummary {
        pair: name,
        ok: false,
        error: Some(format!("{} error: {e}", e.kind())),
        proposals: 0,
        filtered: 0,
        refined: 0,
        discarded: 0,
        s0: 1.0,
        s1: 1.0,
        index: 0,
    }
}

/// Runs the pipeline on every pair; per-pair failures are recorded in
/// `summary.json` and reported as a pair-failure error afterwards.
pub fn cmd_match(cfg: &RunConfig) -> CliResult<MatchSummary> {
    cfg.validate()?;
    let dataset = cfg.dataset.clone().ok_or_else(|| CliError::Config("no dataset (--dataset)".into()))?;
    let weights = load_weights(cfg)?;
    let out = cfg.output_dir()?;
    let matcher = Matcher::new(weights, cfg.matching.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let dirs = dataset::list_pairs(&dataset).map_err(io_at(&dataset))?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let pairs: Vec<PairSummary> = pool(cfg.workers)?.install(|| {
        dirs.par_iter()
            .map(|dir| {
                let name = dataset::pair_name(dir);
                dataset::read_pair(dir)
                    .map_err(io_at(dir))
                    .and_then(|p| match_one(&matcher, &p, &out))
                    .unwrap_or_else(|e| failed_summary(name, &e))
            })
            .collect()
    });
    let failed = pairs.iter().filter(|p| !p.ok).count();
    let summary = MatchSummary { pairs, failed };
    write_file(&out.join("summary.json"), &json(&summary))?;
    if failed > 0 {
        return Err(CliError::Pairs { failed, total: summary.pairs.len() });
    }
    Ok(summary)
}

fn read_named(path: &Path, name: &str, rank: usize) -> CliResult<geomatch::Tensor> {
    let entries = container::load(path).map_err(io_at(path))?;
    let t = container::find(&entries, name).map_err(io_at(path))?;
    if t.rank() != rank {
        return Err(CliError::Format(format!("{}: {name} has shape {:?}, expected rank {rank}", path.display(), t.shape())));
    }
    Ok(t.clone())
}

/// Refines an external `N_A × N_B` score matrix against fine feature maps.
pub fn cmd_refine_external(
    cfg: &RunConfig,
    scores: &Path,
    fine_a: &Path,
    fine_b: &Path,
    theta: f64,
    out_file: &Path,
) -> CliResult<usize> {
    cfg.validate()?;
    if !(theta >= 0.0) || !theta.is_finite() {
        return Err(CliError::Config(format!("threshold {theta} must be finite and ≥ 0")));
    }
    let weights = load_weights(cfg)?;
    let s = read_named(scores, "scores", 2)?;
    let grid = |p: &Path| -> CliResult<FeatureGrid> {
        FeatureGrid::new(read_named(p, "desc", 3)?, FINE_STRIDE).map_err(io_at(p))
    };
    let (fa, fb) = (grid(fine_a)?, grid(fine_b)?);
    let patches = |g: &FeatureGrid| (g.width() * FINE_STRIDE / COARSE_STRIDE) * (g.height() * FINE_STRIDE / COARSE_STRIDE);
    if s.shape() != [patches(&fa), patches(&fb)] {
        return Err(CliError::Format(format!(
            "score matrix {:?} does not match fine grids with {} and {} patches",
            s.shape(),
            patches(&fa),
            patches(&fb)
        )));
    }
    if fa.channels() != weights.refine.dim || fb.channels() != weights.refine.dim {
        return Err(CliError::Format(format!(
            "fine features have {} / {} channels, refinement expects {}",
            fa.channels(),
            fb.channels(),
            weights.refine.dim
        )));
    }
    let fail = |e: geomatch::Error| CliError::Format(e.to_string());
    let (m0, m1) = external_directional(&s, theta).map_err(fail)?;
    let scale = estimate_scale(&m0, &m1);
    let proposals = proposals_from_external(&s, theta).map_err(fail)?;
    let refine_cfg: &RefineConfig = &cfg.matching.refine_config;
    let refined = refine_matches(&proposals, &fa, &fb, &scale, &weights.refine, refine_cfg).map_err(fail)?;
    if let Some(parent) = out_file.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
    }
    write_file(out_file, &refined_csv(&refined.matches))?;
    Ok(refined.matches.len())
}

fn projection_errors(geometry: &PairGeometry, pa: &[Point2<f64>], pb: &[Point2<f64>]) -> Vec<f64> {
    pa.iter()
        .zip(pb)
        .map(|(a, b)| geometry.warp_a_to_b(a).valid_point().map_or(f64::INFINITY, |q| (q - b).norm()))
        .collect()
}

/// Scores one pair's matches against its ground truth.
pub fn evaluate_pair(
    name: &str,
    meta: &PairMeta,
    geometry: &PairGeometry,
    pa: &[Point2<f64>],
    pb: &[Point2<f64>],
    ransac: &RansacConfig,
) -> PairRecord {
    let mut record = PairRecord {
        pair: name.to_string(),
        bucket: meta.bucket,
        scale_ratio: meta.scale_ratio,
        planar: geometry.is_planar(),
        matches: pa.len(),
        corner_error: None,
        rotation_error_deg: None,
        translation_error_deg: None,
        pose_degenerate: false,
        epipolar_precision: None,
        mma: mma(&projection_errors(geometry, pa, pb), &MMA_THRESHOLDS).rates,
    };
    match geometry {
        PairGeometry::Planar { h, width, height } => {
            record.corner_error = ransac_homography(pa, pb, ransac)
                .ok()
                .map(|(est, _)| corner_error(&est, h, *width as f64, *height as f64));
        }
        PairGeometry::Posed { a, b } => {
            let (r_gt, t_gt) = relative_pose(a, b);
            let e_gt = essential_from_pose(&r_gt, &t_gt);
            record.epipolar_precision =
                epipolar_precision(pa, pb, &e_gt, a.k(), b.k(), EPIPOLAR_PRECISION_THRESHOLD).ok();
            if let Ok(est) = pose_from_matches(pa, pb, a.k(), b.k(), ransac) {
                let (r_err, t_err) = pose_errors(&est.r, &est.t, &r_gt, &t_gt);
                record.rotation_error_deg = Some(r_err);
                record.translation_error_deg = Some(t_err);
                record.pose_degenerate = est.degenerate;
            }
        }
    }
    record
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn report_csv(report: &EvalReport) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "pair",
        "bucket",
        "scale_ratio",
        "planar",
        "matches",
        "corner_error",
        "rotation_error_deg",
        "translation_error_deg",
        "pose_degenerate",
        "epipolar_precision",
        "mma_1px",
        "mma_2px",
        "mma_3px",
    ])
    .expect("in-memory");
    for r in &report.records {
        let mut row = vec![
            r.pair.clone(),
            r.bucket.label().to_string(),
            r.scale_ratio.to_string(),
            r.planar.to_string(),
            r.matches.to_string(),
            opt(r.corner_error),
            opt(r.rotation_error_deg),
            opt(r.translation_error_deg),
            r.pose_degenerate.to_string(),
            opt(r.epipolar_precision),
        ];
        row.extend(r.mma.iter().map(|v| v.to_string()));
        w.write_record(row).expect("in-memory");
    }
    w.into_inner().expect("in-memory")
}

fn curves(records: &[PairRecord], value: impl Fn(&PairRecord) -> Option<f64>, max_x: f64) -> Vec<(String, Vec<(f64, f64)>)> {
    ScaleBucket::ALL
        .iter()
        .filter_map(|&b| {
            let errs: Vec<f64> = records
                .iter()
                .filter(|r| r.bucket == b)
                .filter_map(|r| value(r).map(|v| if v.is_nan() { f64::INFINITY } else { v }))
                .collect();
            (!errs.is_empty()).then(|| (b.label().to_string(), cumulative_curve(&errs, max_x, 100)))
        })
        .collect()
}

/// Evaluates `<matches>/<pair>/matches.csv` for every dataset pair. A pair
/// without a match file is scored with zero matches.
pub fn cmd_eval(cfg: &RunConfig, matches: &Path) -> CliResult<EvalReport> {
    cfg.validate()?;
    let dataset = cfg.dataset.clone().ok_or_else(|| CliError::Config("no dataset (--dataset)".into()))?;
    let out = cfg.output_dir()?;
    let dirs = dataset::list_pairs(&dataset).map_err(io_at(&dataset))?;
    let records: Vec<CliResult<PairRecord>> = pool(cfg.workers)?.install(|| {
        dirs.par_iter()
            .map(|dir| {
                let name = dataset::pair_name(dir);
                let (meta, geometry) = dataset::read_meta(dir).map_err(io_at(dir))?;
                let file = matches.join(&name).join("matches.csv");
                let (pa, pb) = if file.exists() { read_points(&file)? } else { (Vec::new(), Vec::new()) };
                Ok(evaluate_pair(&name, &meta, &geometry, &pa, &pb, &cfg.ransac))
            })
            .collect()
    });
    let records = records.into_iter().collect::<CliResult<Vec<_>>>()?;
    let report = EvalReport { ransac: cfg.ransac.clone(), aggregates: aggregate(&records), records };
    std::fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    write_file(&out.join("report.json"), &json(&report))?;
    write_file(&out.join("report.csv"), &report_csv(&report))?;
    let planar: Vec<PairRecord> = report.records.iter().filter(|r| r.planar).cloned().collect();
    if !planar.is_empty() {
        let c = curves(&planar, |r| Some(r.corner_error.unwrap_or(f64::INFINITY)), 10.0);
        write_file(&out.join("corner_curve.svg"), line_plot("Homography corner error", "pixels", 10.0, &c).as_bytes())?;
    }
    let posed: Vec<PairRecord> = report.records.iter().filter(|r| !r.planar).cloned().collect();
    if !posed.is_empty() {
        let c = curves(&posed, |r| Some(r.pose_error().unwrap_or(f64::INFINITY)), 20.0);
        write_file(&out.join("pose_curve.svg"), line_plot("Pose error", "degrees", 20.0, &c).as_bytes())?;
    }
    Ok(report)
}
