//! Two-view projection math used as ground truth by labels and metrics.
//!
//! Pixel coordinates are continuous: an image of width `W` spans `[0, W]`,
//! and pixel `u` covers `[u, u + 1)` with its centre at `u + 0.5`. Depth maps
//! store one value per pixel centre.

use nalgebra::{Matrix3, Point2, Vector3};

use crate::error::{invalid, Error, Result};
use crate::numerics::Tensor;

/// Relative depth disagreement tolerated by the occlusion test.
pub const DEPTH_CONSISTENCY: f64 = 0.05;

/// Intrinsics, world-to-camera pose (`x_cam = R x_world + t`) and a depth map.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    k: Matrix3<f64>,
    k_inv: Matrix3<f64>,
    r: Matrix3<f64>,
    t: Vector3<f64>,
    depth: Tensor,
}

impl CameraFrame {
    pub fn new(k: Matrix3<f64>, r: Matrix3<f64>, t: Vector3<f64>, depth: Tensor) -> Result<Self> {
        if depth.rank() != 2 || depth.numel() == 0 {
            return Err(invalid(format!("depth map must be non-empty H×W, got {:?}", depth.shape())));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(invalid("intrinsics must be upper triangular with K[2][2] = 1"));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(invalid("focal lengths must be positive"));
        }
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        if orth > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(invalid("rotation must be orthonormal with det 1"));
        }
        if depth.data().iter().any(|&d| !(d >= 0.0) || !d.is_finite()) {
            return Err(invalid("depth must be finite and non-negative"));
        }
        let k_inv = k.try_inverse().ok_or_else(|| invalid("singular intrinsics"))?;
        Ok(Self { k, k_inv, r, t, depth })
    }

    pub fn k(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.t
    }

    pub fn depth(&self) -> &Tensor {
        &self.depth
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.depth.shape()[0]
    }

    pub fn contains(&self, p: &Point2<f64>) -> bool {
        in_image(p, self.width(), self.height())
    }

    /// Bilinear depth at `p`; `None` when any of the four neighbouring depth
    /// samples is missing or `p` lies outside the image.
    pub fn depth_at(&self, p: &Point2<f64>) -> Option<f64> {
        if !self.contains(p) {
            return None;
        }
        let (w, h) = (self.width(), self.height());
        let gx = (p.x - 0.5).clamp(0.0, (w - 1) as f64);
        let gy = (p.y - 0.5).clamp(0.0, (h - 1) as f64);
        let x0 = (gx.floor() as usize).min(w.saturating_sub(2));
        let y0 = (gy.floor() as usize).min(h.saturating_sub(2));
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = gx - x0 as f64;
        let fy = gy - y0 as f64;
        let d = |x: usize, y: usize| self.depth.at(&[y, x]) as f64;
        let (d00, d10, d01, d11) = (d(x0, y0), d(x1, y0), d(x0, y1), d(x1, y1));
        if d00 <= 0.0 || d10 <= 0.0 || d01 <= 0.0 || d11 <= 0.0 {
            return None;
        }
        Some(
            d00 * (1.0 - fx) * (1.0 - fy)
                + d10 * fx * (1.0 - fy)
                + d01 * (1.0 - fx) * fy
                + d11 * fx * fy,
        )
    }

    /// World point seen at pixel `p` with camera-frame depth `z`.
    pub fn backproject(&self, p: &Point2<f64>, z: f64) -> Vector3<f64> {
        let ray = self.k_inv * Vector3::new(p.x, p.y, 1.0);
        let cam = ray * (z / ray.z);
        self.r.transpose() * (cam - self.t)
    }

    /// Pixel and camera-frame depth of a world point; `None` behind the camera.
    pub fn project_world(&self, x: &Vector3<f64>) -> Option<(Point2<f64>, f64)> {
        let cam = self.r * x + self.t;
        if cam.z <= 1e-12 {
            return None;
        }
        let h = self.k * cam;
        Some((Point2::new(h.x / h.z, h.y / h.z), cam.z))
    }

    /// Normalized camera coordinates `K⁻¹ [p, 1]`.
    pub fn normalize(&self, p: &Point2<f64>) -> Point2<f64> {
        to_normalized(&self.k_inv, p)
    }
}

pub fn in_image(p: &Point2<f64>, width: usize, height: usize) -> bool {
    p.x.is_finite()
        && p.y.is_finite()
        && p.x >= 0.0
        && p.y >= 0.0
        && p.x < width as f64
        && p.y < height as f64
}

/// Result of warping a pixel from one view into another.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub point: Point2<f64>,
    pub valid: bool,
}

impl Projection {
    fn invalid(point: Point2<f64>) -> Self {
        Self { point, valid: false }
    }

    pub fn valid_point(&self) -> Option<Point2<f64>> {
        self.valid.then_some(self.point)
    }
}

/// Warp `p` from `src` into `dst` using `src` depth, with bounds and
/// depth-consistency (occlusion) checks against `dst`.
pub fn project(src: &CameraFrame, dst: &CameraFrame, p: &Point2<f64>) -> Projection {
    let nan = Point2::new(f64::NAN, f64::NAN);
    let Some(z) = src.depth_at(p) else {
        return Projection::invalid(nan);
    };
    let world = src.backproject(p, z);
    let Some((q, zq)) = dst.project_world(&world) else {
        return Projection::invalid(nan);
    };
    let Some(dq) = dst.depth_at(&q) else {
        return Projection::invalid(q);
    };
    if (zq - dq).abs() > DEPTH_CONSISTENCY * dq {
        return Projection::invalid(q);
    }
    Projection { point: q, valid: true }
}

/// Pixel distance between the projection of `pa` and `pb`; infinite when the
/// projection is invalid.
pub fn projected_distance(src: &CameraFrame, dst: &CameraFrame, pa: &Point2<f64>, pb: &Point2<f64>) -> f64 {
    match project(src, dst, pa).valid_point() {
        Some(q) => (q - pb).norm(),
        None => f64::INFINITY,
    }
}

/// Planar projective transform, stored with `H[2][2] = 1` when that entry is nonzero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite homography".into()));
        }
        let norm = m.norm();
        if norm == 0.0 || (m.determinant() / norm.powi(3)).abs() < 1e-12 {
            return Err(Error::Degenerate("singular homography".into()));
        }
        let m = if m[(2, 2)].abs() > 1e-12 { m / m[(2, 2)] } else { m };
        Ok(Self(m))
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        // `new` rejected singular matrices
        Self::new(self.0.try_inverse().expect("non-singular by construction"))
            .expect("inverse of a valid homography is valid")
    }

    pub fn apply(&self, p: &Point2<f64>) -> Result<Point2<f64>> {
        let v = self.0 * Vector3::new(p.x, p.y, 1.0);
        let scale = self.0.row(2).abs().sum().max(1e-300);
        if v.z.abs() < 1e-12 * scale {
            return Err(Error::Degenerate(format!(
                "projective denominator vanishes at ({}, {})",
                p.x, p.y
            )));
        }
        Ok(Point2::new(v.x / v.z, v.y / v.z))
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)], m[(0, 1)], m[(0, 2)],
            m[(1, 0)], m[(1, 1)], m[(1, 2)],
            m[(2, 0)], m[(2, 1)], m[(2, 2)],
        ]
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(invalid(format!("homography needs 9 entries, got {}", v.len())));
        }
        Self::new(Matrix3::from_row_slice(v))
    }
}

pub fn to_normalized(k_inv: &Matrix3<f64>, p: &Point2<f64>) -> Point2<f64> {
    let v = k_inv * Vector3::new(p.x, p.y, 1.0);
    Point2::new(v.x / v.z, v.y / v.z)
}

pub fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// Pose of `dst` relative to `src`: `x_dst = R x_src + t`.
pub fn relative_pose(src: &CameraFrame, dst: &CameraFrame) -> (Matrix3<f64>, Vector3<f64>) {
    let r = dst.rotation() * src.rotation().transpose();
    let t = dst.translation() - r * src.translation();
    (r, t)
}

/// Essential matrix `[t]× R` for the relative pose `x_b = R x_a + t`.
pub fn essential_from_pose(r: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix3<f64> {
    skew(t) * r
}

/// Homography induced by the plane `nᵀ x = d` (in camera-A coordinates)
/// between two views with relative pose `x_b = R x_a + t`.
pub fn plane_homography(
    ka: &Matrix3<f64>,
    kb: &Matrix3<f64>,
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    n: &Vector3<f64>,
    d: f64,
) -> Result<Homography> {
    let ka_inv = ka.try_inverse().ok_or_else(|| invalid("singular intrinsics"))?;
    Homography::new(kb * (r + t * n.transpose() / d) * ka_inv)
}

/// Symmetric epipolar distance between normalized points under an essential
/// (or fundamental) matrix, after scaling the matrix to unit Frobenius norm.
///
/// `d = (x_bᵀ E x_a)² · (1/|E x_a|²_{xy} + 1/|Eᵀ x_b|²_{xy})`
pub fn epipolar_error(e: &Matrix3<f64>, pa: &Point2<f64>, pb: &Point2<f64>) -> f64 {
    let norm = e.norm();
    if norm == 0.0 || !norm.is_finite() {
        return f64::INFINITY;
    }
    let e = e / norm;
    let xa = Vector3::new(pa.x, pa.y, 1.0);
    let xb = Vector3::new(pb.x, pb.y, 1.0);
    let lb = e * xa;
    let la = e.transpose() * xb;
    let num = xb.dot(&lb).powi(2);
    let db = lb.x * lb.x + lb.y * lb.y;
    let da = la.x * la.x + la.y * la.y;
    if db == 0.0 || da == 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    num * (1.0 / db + 1.0 / da)
}

pub fn rotation_from_axis_angle(axis: &Vector3<f64>, angle_rad: f64) -> Matrix3<f64> {
    let n = axis.norm();
    if n == 0.0 || angle_rad == 0.0 {
        return Matrix3::identity();
    }
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle_rad).into_inner()
}

/// Angle of a rotation matrix in degrees.
pub fn rotation_angle_deg(r: &Matrix3<f64>) -> f64 {
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Angle between two direction vectors in degrees.
pub fn vector_angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return 180.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}
