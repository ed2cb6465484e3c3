//! Evaluation: robust homography and essential-matrix estimation, corner
//! accuracy, mean matching accuracy, epipolar precision and pose AUC.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Matrix3, Matrix4, Point2, Vector3, Vector4};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{epipolar_error, rotation_angle_deg, to_normalized, vector_angle_deg, Homography};
use crate::synthscene::ScaleBucket;

pub const CORNER_THRESHOLDS: [f64; 3] = [1.0, 3.0, 5.0];
pub const MMA_THRESHOLDS: [f64; 3] = [1.0, 2.0, 3.0];
pub const AUC_THRESHOLDS: [f64; 3] = [5.0, 10.0, 20.0];
pub const EPIPOLAR_PRECISION_THRESHOLD: f64 = 1e-4;
/// Matches per pair considered by MMA.
pub const MMA_CAP: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Homography inlier threshold, pixels.
    pub homography_threshold: f64,
    /// Essential-matrix inlier threshold on the squared Sampson distance,
    /// normalised coordinates (the same scale as the epipolar error).
    pub epipolar_threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { iterations: 2000, homography_threshold: 3.0, epipolar_threshold: 1e-3, seed: 0 }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || !(self.homography_threshold > 0.0) || !(self.epipolar_threshold > 0.0) {
            return Err(invalid("RANSAC needs positive iterations and thresholds"));
        }
        Ok(())
    }
}

/// Similarity moving the centroid to the origin with mean distance √2.
fn normalising_transform(points: &[Point2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let mean = points.iter().map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean > 0.0 { std::f64::consts::SQRT_2 / mean } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn apply(t: &Matrix3<f64>, p: &Point2<f64>) -> Point2<f64> {
    let v = t * Vector3::new(p.x, p.y, 1.0);
    Point2::new(v.x / v.z, v.y / v.z)
}

/// Right null vector of a system with 9 unknowns (rows padded to 9).
fn null_vector9(rows: Vec<[f64; 9]>) -> [f64; 9] {
    let m = rows.len().max(9);
    let mut a = DMatrix::<f64>::zeros(m, 9);
    for (r, row) in rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            a[(r, c)] = *v;
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.expect("requested V");
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (k, &s)| if s < best.1 { (k, s) } else { best });
    let mut out = [0.0; 9];
    for (c, v) in out.iter_mut().enumerate() {
        *v = vt[(k, c)];
    }
    out
}

/// Normalised DLT from at least 4 correspondences (least squares beyond 4).
pub fn dlt_homography(src: &[Point2<f64>], dst: &[Point2<f64>]) -> Result<Homography> {
    if src.len() != dst.len() {
        return Err(invalid("source and destination counts differ"));
    }
    if src.len() < 4 {
        return Err(Error::InsufficientData { needed: 4, got: src.len() });
    }
    let ts = normalising_transform(src);
    let td = normalising_transform(dst);
    let mut rows = Vec::with_capacity(2 * src.len());
    for (p, q) in src.iter().zip(dst) {
        let (p, q) = (apply(&ts, p), apply(&td, q));
        rows.push([-p.x, -p.y, -1.0, 0.0, 0.0, 0.0, q.x * p.x, q.x * p.y, q.x]);
        rows.push([0.0, 0.0, 0.0, -p.x, -p.y, -1.0, q.y * p.x, q.y * p.y, q.y]);
    }
    let h = Matrix3::from_row_slice(&null_vector9(rows));
    let td_inv = td.try_inverse().ok_or_else(|| Error::Degenerate("normalisation".into()))?;
    Homography::new(td_inv * h * ts)
}

fn transfer_error(h: &Homography, p: &Point2<f64>, q: &Point2<f64>) -> f64 {
    h.apply(p).map(|r| (r - q).norm()).unwrap_or(f64::INFINITY)
}

/// 4-point RANSAC with a final least-squares refit on the inliers.
pub fn ransac_homography(
    src: &[Point2<f64>],
    dst: &[Point2<f64>],
    cfg: &RansacConfig,
) -> Result<(Homography, Vec<bool>)> {
    cfg.validate()?;
    if src.len() != dst.len() {
        return Err(invalid("source and destination counts differ"));
    }
    let n = src.len();
    if n < 4 {
        return Err(Error::InsufficientData { needed: 4, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let inliers_of = |h: &Homography| -> Vec<bool> {
        src.iter().zip(dst).map(|(p, q)| transfer_error(h, p, q) < cfg.homography_threshold).collect()
    };
    let mut best: Option<(usize, Vec<bool>)> = None;
    for _ in 0..cfg.iterations {
        let idx = sample(&mut rng, n, 4);
        let s: Vec<_> = idx.iter().map(|k| src[k]).collect();
        let d: Vec<_> = idx.iter().map(|k| dst[k]).collect();
        let Ok(h) = dlt_homography(&s, &d) else { continue };
        let mask = inliers_of(&h);
        let count = mask.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, mask));
            if count == n {
                break;
            }
        }
    }
    let (count, mask) = best.ok_or_else(|| Error::Degenerate("no non-degenerate minimal sample".into()))?;
    if count < 4 {
        return Err(Error::Degenerate(format!("best model has only {count} inliers")));
    }
    let s: Vec<_> = src.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
    let d: Vec<_> = dst.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
    let h = dlt_homography(&s, &d)?;
    let mask = inliers_of(&h);
    Ok((h, mask))
}

fn image_corners(width: f64, height: f64) -> [Point2<f64>; 4] {
    [
        Point2::new(0.0, 0.0),
        Point2::new(width, 0.0),
        Point2::new(width, height),
        Point2::new(0.0, height),
    ]
}

/// Mean distance between the image corners mapped by both homographies.
pub fn corner_error(h_est: &Homography, h_gt: &Homography, width: f64, height: f64) -> f64 {
    let mut sum = 0.0;
    for c in image_corners(width, height) {
        match (h_est.apply(&c), h_gt.apply(&c)) {
            (Ok(a), Ok(b)) => sum += (a - b).norm(),
            _ => return f64::INFINITY,
        }
    }
    let e = sum / 4.0;
    if e.is_finite() {
        e
    } else {
        f64::INFINITY
    }
}

/// Pass/fail per threshold; a missing estimate fails everywhere.
pub fn corner_accuracy(
    h_est: Option<&Homography>,
    h_gt: &Homography,
    width: f64,
    height: f64,
    thresholds: &[f64],
) -> Vec<bool> {
    let e = h_est.map_or(f64::INFINITY, |h| corner_error(h, h_gt, width, height));
    thresholds.iter().map(|&t| e < t).collect()
}

/// Fraction of errors strictly below each threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mma {
    pub rates: Vec<f64>,
    /// No matches were available.
    pub empty: bool,
}

pub fn mma(errors: &[f64], thresholds: &[f64]) -> Mma {
    let errors = &errors[..errors.len().min(MMA_CAP)];
    if errors.is_empty() {
        return Mma { rates: vec![0.0; thresholds.len()], empty: true };
    }
    let n = errors.len() as f64;
    Mma {
        rates: thresholds.iter().map(|&t| errors.iter().filter(|&&e| e < t).count() as f64 / n).collect(),
        empty: false,
    }
}

/// Fraction of pixel matches whose symmetric epipolar error under `e_gt`
/// (normalised coordinates) is below `thresh`.
pub fn epipolar_precision(
    pa: &[Point2<f64>],
    pb: &[Point2<f64>],
    e_gt: &Matrix3<f64>,
    ka: &Matrix3<f64>,
    kb: &Matrix3<f64>,
    thresh: f64,
) -> Result<f64> {
    if pa.len() != pb.len() {
        return Err(invalid("point counts differ"));
    }
    if pa.is_empty() {
        return Ok(0.0);
    }
    let ka_inv = ka.try_inverse().ok_or_else(|| invalid("singular intrinsics"))?;
    let kb_inv = kb.try_inverse().ok_or_else(|| invalid("singular intrinsics"))?;
    let good = pa
        .iter()
        .zip(pb)
        .filter(|(a, b)| epipolar_error(e_gt, &to_normalized(&ka_inv, a), &to_normalized(&kb_inv, b)) < thresh)
        .count();
    Ok(good as f64 / pa.len() as f64)
}

/// Normalised 8-point essential matrix from normalised image coordinates,
/// projected to singular values `(1, 1, 0)`.
pub fn eight_point_essential(xa: &[Point2<f64>], xb: &[Point2<f64>]) -> Result<Matrix3<f64>> {
    if xa.len() != xb.len() {
        return Err(invalid("point counts differ"));
    }
    if xa.len() < 8 {
        return Err(Error::InsufficientData { needed: 8, got: xa.len() });
    }
    let ta = normalising_transform(xa);
    let tb = normalising_transform(xb);
    let rows = xa
        .iter()
        .zip(xb)
        .map(|(a, b)| {
            let (a, b) = (apply(&ta, a), apply(&tb, b));
            [b.x * a.x, b.x * a.y, b.x, b.y * a.x, b.y * a.y, b.y, a.x, a.y, 1.0]
        })
        .collect();
    let e = tb.transpose() * Matrix3::from_row_slice(&null_vector9(rows)) * ta;
    let svd = e.svd(true, true);
    let (u, vt) = (svd.u.expect("U"), svd.v_t.expect("V"));
    let e = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)) * vt;
    let n = e.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Degenerate("essential matrix vanished".into()));
    }
    Ok(e / n)
}

/// Sampson distance (squared, normalised units).
pub fn sampson_distance(e: &Matrix3<f64>, a: &Point2<f64>, b: &Point2<f64>) -> f64 {
    let xa = Vector3::new(a.x, a.y, 1.0);
    let xb = Vector3::new(b.x, b.y, 1.0);
    let ea = e * xa;
    let eb = e.transpose() * xb;
    let den = ea.x * ea.x + ea.y * ea.y + eb.x * eb.x + eb.y * eb.y;
    if den == 0.0 {
        return f64::INFINITY;
    }
    xb.dot(&ea).powi(2) / den
}

fn triangulate(r: &Matrix3<f64>, t: &Vector3<f64>, a: &Point2<f64>, b: &Point2<f64>) -> Option<(f64, f64)> {
    let p1 = [Vector4::new(1.0, 0.0, 0.0, 0.0), Vector4::new(0.0, 1.0, 0.0, 0.0), Vector4::new(0.0, 0.0, 1.0, 0.0)];
    let p2: Vec<Vector4<f64>> = (0..3).map(|k| Vector4::new(r[(k, 0)], r[(k, 1)], r[(k, 2)], t[k])).collect();
    let rows = [
        a.x * p1[2] - p1[0],
        a.y * p1[2] - p1[1],
        b.x * p2[2] - p2[0],
        b.y * p2[2] - p2[1],
    ];
    let m = Matrix4::from_rows(&[rows[0].transpose(), rows[1].transpose(), rows[2].transpose(), rows[3].transpose()]);
    let svd = m.svd(false, true);
    let vt = svd.v_t?;
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (k, &s)| if s < best.1 { (k, s) } else { best });
    let x = Vector4::new(vt[(k, 0)], vt[(k, 1)], vt[(k, 2)], vt[(k, 3)]);
    if x.w.abs() < 1e-12 {
        return None;
    }
    let x = Vector3::new(x.x / x.w, x.y / x.w, x.z / x.w);
    Some((x.z, (r * x + t).z))
}

/// The four `(R, t)` factorisations of an essential matrix, `t` unit-norm.
pub fn decompose_essential(e: &Matrix3<f64>) -> [(Matrix3<f64>, Vector3<f64>); 4] {
    let svd = e.svd(true, true);
    let mut u = svd.u.expect("U");
    let mut vt = svd.v_t.expect("V");
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    let t = u.column(2).into_owned().normalize();
    [(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub r: Matrix3<f64>,
    /// Unit-norm translation direction.
    pub t: Vector3<f64>,
    pub e: Matrix3<f64>,
    pub inliers: Vec<bool>,
    /// A homography explains the inliers (zero baseline or planar scene), so
    /// the translation is not observable.
    pub degenerate: bool,
}

/// Relative pose `x_b = R x_a + t` from pixel matches via RANSAC over the
/// normalised 8-point algorithm and a cheirality vote.
pub fn pose_from_matches(
    pa: &[Point2<f64>],
    pb: &[Point2<f64>],
    ka: &Matrix3<f64>,
    kb: &Matrix3<f64>,
    cfg: &RansacConfig,
) -> Result<PoseEstimate> {
    cfg.validate()?;
    if pa.len() != pb.len() {
        return Err(invalid("point counts differ"));
    }
    let n = pa.len();
    if n < 8 {
        return Err(Error::InsufficientData { needed: 8, got: n });
    }
    let ka_inv = ka.try_inverse().ok_or_else(|| invalid("singular intrinsics"))?;
    let kb_inv = kb.try_inverse().ok_or_else(|| invalid("singular intrinsics"))?;
    let xa: Vec<_> = pa.iter().map(|p| to_normalized(&ka_inv, p)).collect();
    let xb: Vec<_> = pb.iter().map(|p| to_normalized(&kb_inv, p)).collect();
    let thresh = cfg.epipolar_threshold;
    let inliers_of =
        |e: &Matrix3<f64>| -> Vec<bool> { xa.iter().zip(&xb).map(|(a, b)| sampson_distance(e, a, b) < thresh).collect() };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, Vec<bool>)> = None;
    for _ in 0..cfg.iterations {
        let idx = sample(&mut rng, n, 8);
        let sa: Vec<_> = idx.iter().map(|k| xa[k]).collect();
        let sb: Vec<_> = idx.iter().map(|k| xb[k]).collect();
        let Ok(e) = eight_point_essential(&sa, &sb) else { continue };
        let mask = inliers_of(&e);
        let count = mask.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, mask));
            if count == n {
                break;
            }
        }
    }
    let (count, mask) = best.ok_or_else(|| Error::Degenerate("no essential matrix found".into()))?;
    if count < 8 {
        return Err(Error::Degenerate(format!("best essential model has only {count} inliers")));
    }
    let ia: Vec<_> = xa.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
    let ib: Vec<_> = xb.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
    let e = eight_point_essential(&ia, &ib)?;
    let inliers = inliers_of(&e);

    let (r, t) = decompose_essential(&e)
        .into_iter()
        .max_by_key(|(r, t)| {
            ia.iter()
                .zip(&ib)
                .filter(|(a, b)| matches!(triangulate(r, t, a, b), Some((za, zb)) if za > 0.0 && zb > 0.0))
                .count()
        })
        .expect("four candidates");

    let degenerate = match dlt_homography(&ia, &ib) {
        Ok(h) => {
            let explained = ia
                .iter()
                .zip(&ib)
                .filter(|(a, b)| transfer_error(&h, a, b) < thresh)
                .count();
            explained as f64 >= 0.9 * ia.len() as f64
        }
        Err(_) => true,
    };
    Ok(PoseEstimate { r, t, e, inliers, degenerate })
}

/// Rotation and translation-direction errors in degrees; the translation
/// error ignores the sign ambiguity.
pub fn pose_errors(r_est: &Matrix3<f64>, t_est: &Vector3<f64>, r_gt: &Matrix3<f64>, t_gt: &Vector3<f64>) -> (f64, f64) {
    let r_err = rotation_angle_deg(&(r_est.transpose() * r_gt));
    let t_err = vector_angle_deg(t_est, t_gt);
    (r_err, t_err.min(180.0 - t_err))
}

/// Area under the empirical CDF of `errors` on `[0, t]`, divided by `t`.
/// Non-finite errors count as failures.
pub fn pose_auc(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if errors.iter().any(|e| *e < 0.0) {
        return Err(invalid("pose errors must be non-negative"));
    }
    let n = errors.len() as f64;
    thresholds
        .iter()
        .map(|&t| {
            if !(t > 0.0) {
                return Err(invalid(format!("AUC threshold must be positive, got {t}")));
            }
            let area: f64 = errors.iter().filter(|e| e.is_finite()).map(|&e| (t - e).max(0.0)).sum();
            Ok(area / (n * t))
        })
        .collect()
}

/// Per-pair evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair: String,
    pub bucket: ScaleBucket,
    pub scale_ratio: f64,
    /// Planar pairs are scored by corner error, posed pairs by pose error.
    pub planar: bool,
    pub matches: usize,
    /// `None` when no homography could be estimated.
    pub corner_error: Option<f64>,
    pub rotation_error_deg: Option<f64>,
    pub translation_error_deg: Option<f64>,
    pub pose_degenerate: bool,
    pub epipolar_precision: Option<f64>,
    pub mma: Vec<f64>,
}

impl PairRecord {
    /// `max(rotation, translation)` error; failures are infinite.
    pub fn pose_error(&self) -> Option<f64> {
        match (self.rotation_error_deg, self.translation_error_deg) {
            (Some(r), Some(t)) => Some(r.max(t)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub split: String,
    pub pairs: usize,
    pub homography_pairs: usize,
    /// Fraction of homography pairs with mean corner error below 1/3/5 px.
    pub corner_accuracy: Option<Vec<f64>>,
    pub mma: Vec<f64>,
    pub pose_pairs: usize,
    /// AUC at 5/10/20 degrees.
    pub pose_auc: Option<Vec<f64>>,
    pub epipolar_precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ransac: RansacConfig,
    pub records: Vec<PairRecord>,
    pub aggregates: Vec<Aggregate>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn aggregate_split(split: &str, records: &[&PairRecord]) -> Aggregate {
    let corner: Vec<f64> =
        records.iter().filter(|r| r.planar).map(|r| r.corner_error.unwrap_or(f64::INFINITY)).collect();
    let corner_accuracy = (!corner.is_empty()).then(|| {
        CORNER_THRESHOLDS
            .iter()
            .map(|&t| corner.iter().filter(|&&e| e < t).count() as f64 / corner.len() as f64)
            .collect()
    });
    let mma = (0..MMA_THRESHOLDS.len())
        .map(|k| mean(&records.iter().filter_map(|r| r.mma.get(k).copied()).collect::<Vec<_>>()).unwrap_or(0.0))
        .collect();
    let pose: Vec<f64> = records
        .iter()
        .filter(|r| !r.planar)
        .map(|r| r.pose_error().unwrap_or(f64::INFINITY))
        .collect();
    let precision: Vec<f64> = records.iter().filter_map(|r| r.epipolar_precision).collect();
    Aggregate {
        split: split.to_string(),
        pairs: records.len(),
        homography_pairs: corner.len(),
        corner_accuracy,
        mma,
        pose_pairs: pose.len(),
        pose_auc: pose_auc(&pose, &AUC_THRESHOLDS).ok(),
        epipolar_precision: mean(&precision),
    }
}

/// Aggregates per scale bucket (in bucket order) followed by `all`. Failed
/// estimates count as infinite errors.
pub fn aggregate(records: &[PairRecord]) -> Vec<Aggregate> {
    let mut by_bucket: BTreeMap<ScaleBucket, Vec<&PairRecord>> = BTreeMap::new();
    for r in records {
        by_bucket.entry(r.bucket).or_default().push(r);
    }
    let mut out: Vec<Aggregate> =
        by_bucket.iter().map(|(b, rs)| aggregate_split(b.label(), rs)).collect();
    let all: Vec<&PairRecord> = records.iter().collect();
    out.push(aggregate_split("all", &all));
    out
}
