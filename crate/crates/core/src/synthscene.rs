//! Synthetic image pairs with exact ground-truth geometry.
//!
//! Instead of rendering pixels, each pair carries dense descriptor grids drawn
//! from a band-limited random field painted onto the scene: view A samples
//! the field directly, view B samples it through the ground-truth warp
//! (homography, or ray-cast surface plus camera poses) and adds bounded noise.

use nalgebra::{Matrix3, Point2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::features::{FeatureGrid, COARSE_STRIDE, FINE_STRIDE};
use crate::geometry::{self, in_image, CameraFrame, Homography, Projection};
use crate::numerics::Tensor;

pub const GENERATOR_NAME: &str = "ChaCha8 (rand_chacha 0.3); seed_from_u64, stream 0 = fields, 1 = noise, 2 = background; normals via rand_distr ziggurat";

const FIELD_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;
const BACKGROUND_STREAM: u64 = 2;

/// Sizes and field statistics shared by every generated pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub coarse_channels: usize,
    pub fine_channels: usize,
    /// Gaussian correlation length of the coarse field, in A pixels.
    pub coarse_corr_len: f64,
    /// Gaussian correlation length of the fine field, in A pixels.
    pub fine_corr_len: f64,
    /// Sinusoids summed per channel.
    pub waves_per_channel: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            coarse_channels: 256,
            fine_channels: 128,
            coarse_corr_len: 6.0,
            fine_corr_len: 4.0,
            waves_per_channel: 16,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.width.is_multiple_of(COARSE_STRIDE) || !self.height.is_multiple_of(COARSE_STRIDE) || self.width == 0 || self.height == 0 {
            return Err(invalid(format!(
                "image size {}×{} must be a positive multiple of {COARSE_STRIDE}",
                self.width, self.height
            )));
        }
        if self.coarse_corr_len <= 0.0 || self.fine_corr_len <= 0.0 || self.waves_per_channel == 0 {
            return Err(invalid("field parameters must be positive"));
        }
        Ok(())
    }
}

/// Scale-ratio buckets used for evaluation splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScaleBucket {
    #[serde(rename = "[1,2)")]
    OneToTwo,
    #[serde(rename = "[2,3)")]
    TwoToThree,
    #[serde(rename = "[3,4)")]
    ThreeToFour,
    #[serde(rename = "[4,inf)")]
    FourPlus,
}

impl ScaleBucket {
    pub const ALL: [ScaleBucket; 4] = [
        ScaleBucket::OneToTwo,
        ScaleBucket::TwoToThree,
        ScaleBucket::ThreeToFour,
        ScaleBucket::FourPlus,
    ];

    pub fn from_ratio(ratio: f64) -> Self {
        match ratio {
            r if r < 2.0 => Self::OneToTwo,
            r if r < 3.0 => Self::TwoToThree,
            r if r < 4.0 => Self::ThreeToFour,
            _ => Self::FourPlus,
        }
    }

    /// Half-open range; the last bucket is capped at 5 for sampling purposes.
    pub fn sampling_range(self) -> (f64, f64) {
        match self {
            Self::OneToTwo => (1.0, 2.0),
            Self::TwoToThree => (2.0, 3.0),
            Self::ThreeToFour => (3.0, 4.0),
            Self::FourPlus => (4.0, 5.0),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::OneToTwo => "[1,2)",
            Self::TwoToThree => "[2,3)",
            Self::ThreeToFour => "[3,4)",
            Self::FourPlus => "[4,inf)",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.label() == s)
    }
}

#[derive(Debug, Clone, Copy)]
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
}

/// Sum-of-sinusoids random field with unit per-channel variance and a
/// Gaussian autocorrelation of length `corr_len`.
#[derive(Debug, Clone)]
pub struct DescriptorField {
    channels: usize,
    per_channel: usize,
    amplitude: f64,
    waves: Vec<Wave>,
}

impl DescriptorField {
    pub fn sample(rng: &mut impl Rng, channels: usize, per_channel: usize, corr_len: f64) -> Self {
        let sigma_k = 1.0 / corr_len;
        let waves = (0..channels * per_channel)
            .map(|_| {
                let kx: f64 = StandardNormal.sample(rng);
                let ky: f64 = StandardNormal.sample(rng);
                Wave {
                    kx: kx * sigma_k,
                    ky: ky * sigma_k,
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                }
            })
            .collect();
        Self {
            channels,
            per_channel,
            amplitude: (2.0 / per_channel as f64).sqrt(),
            waves,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn eval_into(&self, p: &Point2<f64>, out: &mut [f32]) {
        for (c, o) in out.iter_mut().enumerate() {
            let waves = &self.waves[c * self.per_channel..(c + 1) * self.per_channel];
            let v: f64 = waves.iter().map(|w| (w.kx * p.x + w.ky * p.y + w.phase).cos()).sum();
            *o = (v * self.amplitude) as f32;
        }
    }

    pub fn eval(&self, p: &Point2<f64>) -> Vec<f32> {
        let mut out = vec![0.0; self.channels];
        self.eval_into(p, &mut out);
        out
    }
}

/// Scene surface in camera-A coordinates (A sits at the world origin).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DepthProfile {
    /// Plane `nᵀx = distance`.
    Plane { normal: [f64; 3], distance: f64 },
    /// Fronto-parallel planes: `near` where A sees columns `u < split_x`, `far` elsewhere.
    Step { near: f64, far: f64, split_x: f64 },
}

impl DepthProfile {
    pub fn frontal(distance: f64) -> Self {
        Self::Plane { normal: [0.0, 0.0, 1.0], distance }
    }

    fn base_depth(&self) -> f64 {
        match self {
            Self::Plane { normal, distance } => distance / normal[2].abs().max(1e-9),
            Self::Step { near, far, .. } => 0.5 * (near + far),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Self::Plane { normal, distance } => {
                let n = Vector3::from(*normal);
                if n.norm() < 1e-9 || *distance <= 0.0 || n.z <= 0.0 {
                    return Err(invalid("plane must face camera A at positive distance"));
                }
            }
            Self::Step { near, far, .. } => {
                if *near <= 0.0 || *far <= 0.0 {
                    return Err(invalid("step depths must be positive"));
                }
            }
        }
        Ok(())
    }
}

struct Surface<'a> {
    profile: &'a DepthProfile,
    k_a: Matrix3<f64>,
}

impl Surface<'_> {
    /// First intersection of the ray `origin + λ·dir` (λ > 0), in world = camera-A coordinates.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Vector3<f64>> {
        match *self.profile {
            DepthProfile::Plane { normal, distance } => {
                let n = Vector3::from(normal);
                let denom = n.dot(dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let lambda = (distance - n.dot(origin)) / denom;
                (lambda > 1e-9).then(|| origin + dir * lambda)
            }
            DepthProfile::Step { near, far, split_x } => {
                let mut best: Option<(f64, Vector3<f64>)> = None;
                for (z, near_side) in [(near, true), (far, false)] {
                    if dir.z.abs() < 1e-12 {
                        continue;
                    }
                    let lambda = (z - origin.z) / dir.z;
                    if lambda <= 1e-9 {
                        continue;
                    }
                    let x = origin + dir * lambda;
                    let u = self.k_a[(0, 0)] * x.x / x.z + self.k_a[(0, 1)] * x.y / x.z + self.k_a[(0, 2)];
                    if (u < split_x) == near_side && best.is_none_or(|(l, _)| lambda < l) {
                        best = Some((lambda, x));
                    }
                }
                best.map(|(_, x)| x)
            }
        }
    }
}

fn camera_center(frame: &CameraFrame) -> Vector3<f64> {
    -frame.rotation().transpose() * frame.translation()
}

fn pixel_ray(frame: &CameraFrame, p: &Point2<f64>) -> Vector3<f64> {
    let k_inv = frame.k().try_inverse().expect("validated intrinsics");
    frame.rotation().transpose() * (k_inv * Vector3::new(p.x, p.y, 1.0))
}

/// Ground-truth geometry of a pair.
#[derive(Debug, Clone, PartialEq)]
pub enum PairGeometry {
    /// Planar scene; `h` maps A pixels to B pixels.
    Planar { h: Homography, width: usize, height: usize },
    /// Calibrated views with depth maps.
    Posed { a: CameraFrame, b: CameraFrame },
}

impl PairGeometry {
    pub fn width(&self) -> usize {
        match self {
            Self::Planar { width, .. } => *width,
            Self::Posed { a, .. } => a.width(),
        }
    }

    pub fn height(&self) -> usize {
        match self {
            Self::Planar { height, .. } => *height,
            Self::Posed { a, .. } => a.height(),
        }
    }

    pub fn warp_a_to_b(&self, p: &Point2<f64>) -> Projection {
        match self {
            Self::Planar { h, width, height } => planar_warp(h, p, *width, *height),
            Self::Posed { a, b } => geometry::project(a, b, p),
        }
    }

    pub fn warp_b_to_a(&self, q: &Point2<f64>) -> Projection {
        match self {
            Self::Planar { h, width, height } => planar_warp(&h.inverse(), q, *width, *height),
            Self::Posed { a, b } => geometry::project(b, a, q),
        }
    }

    pub fn is_planar(&self) -> bool {
        matches!(self, Self::Planar { .. })
    }
}

fn planar_warp(h: &Homography, p: &Point2<f64>, width: usize, height: usize) -> Projection {
    if !in_image(p, width, height) {
        return Projection { point: Point2::new(f64::NAN, f64::NAN), valid: false };
    }
    match h.apply(p) {
        Ok(q) => Projection { point: q, valid: in_image(&q, width, height) },
        Err(_) => Projection { point: Point2::new(f64::NAN, f64::NAN), valid: false },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanarParams {
    /// Linear scale ratio ≥ 1; A's content appears shrunk by this factor in B.
    pub scale_ratio: f64,
    pub rotation_deg: f64,
    /// Offset of the image centre's image in B, pixels.
    pub translation: [f64; 2],
    pub noise_sigma: f64,
}

impl Default for PlanarParams {
    fn default() -> Self {
        Self { scale_ratio: 1.0, rotation_deg: 0.0, translation: [0.0, 0.0], noise_sigma: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosedParams {
    pub focal: f64,
    pub depth: DepthProfile,
    /// Forward motion of camera B such that the base depth shrinks by this factor (B zooms in).
    pub zoom: f64,
    /// Axis-angle rotation of camera B, degrees.
    pub rotation_deg: [f64; 3],
    /// Sideways offset of camera B's centre, scene units.
    pub lateral: [f64; 2],
    pub noise_sigma: f64,
}

impl Default for PosedParams {
    fn default() -> Self {
        Self {
            focal: 64.0,
            depth: DepthProfile::frontal(10.0),
            zoom: 1.0,
            rotation_deg: [0.0; 3],
            lateral: [0.0; 2],
            noise_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PairParams {
    Planar(PlanarParams),
    Homography { h: [f64; 9], noise_sigma: f64 },
    Posed(PosedParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub seed: u64,
    pub generator: String,
    pub params: PairParams,
    pub scene: SceneConfig,
    /// Linear scale ratio ≥ 1 between the views at the image centre.
    pub scale_ratio: f64,
    pub bucket: ScaleBucket,
}

/// A generated pair: geometry, descriptor grids at 1/8 and 1/2, and metadata.
#[derive(Debug, Clone)]
pub struct ScenePair {
    pub geometry: PairGeometry,
    pub coarse_a: FeatureGrid,
    pub coarse_b: FeatureGrid,
    pub fine_a: FeatureGrid,
    pub fine_b: FeatureGrid,
    pub meta: PairMeta,
}

impl ScenePair {
    pub fn width(&self) -> usize {
        self.geometry.width()
    }

    pub fn height(&self) -> usize {
        self.geometry.height()
    }
}

struct Fields {
    coarse: DescriptorField,
    fine: DescriptorField,
    background_coarse: DescriptorField,
    background_fine: DescriptorField,
}

impl Fields {
    fn new(seed: u64, cfg: &SceneConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(FIELD_STREAM);
        let coarse = DescriptorField::sample(&mut rng, cfg.coarse_channels, cfg.waves_per_channel, cfg.coarse_corr_len);
        let fine = DescriptorField::sample(&mut rng, cfg.fine_channels, cfg.waves_per_channel, cfg.fine_corr_len);
        let mut bg = ChaCha8Rng::seed_from_u64(seed);
        bg.set_stream(BACKGROUND_STREAM);
        let background_coarse =
            DescriptorField::sample(&mut bg, cfg.coarse_channels, cfg.waves_per_channel, cfg.coarse_corr_len);
        let background_fine = DescriptorField::sample(&mut bg, cfg.fine_channels, cfg.waves_per_channel, cfg.fine_corr_len);
        Self { coarse, fine, background_coarse, background_fine }
    }
}

fn grid_from_fn(
    cfg: &SceneConfig,
    stride: usize,
    channels: usize,
    mut f: impl FnMut(&Point2<f64>, &mut [f32]),
) -> FeatureGrid {
    let (h, w) = (cfg.height / stride, cfg.width / stride);
    let mut data = Tensor::zeros(&[h, w, channels]);
    for row in 0..h {
        for col in 0..w {
            let p = Point2::new((col as f64 + 0.5) * stride as f64, (row as f64 + 0.5) * stride as f64);
            f(&p, data.row_mut(row * w + col));
        }
    }
    FeatureGrid::new(data, stride).expect("rank 3")
}

fn add_noise(grid: &mut FeatureGrid, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma <= 0.0 {
        return;
    }
    let mut t = grid.tensor().clone();
    for v in t.data_mut() {
        let n: f64 = StandardNormal.sample(rng);
        *v += (n.clamp(-3.0, 3.0) * sigma) as f32;
    }
    *grid = grid.with_tensor(t).expect("same shape");
}

/// Builds both descriptor grids given a continuous B→A warp. `None` from the
/// warp means the ray leaves the scene; those cells get background content.
fn build_pair(
    seed: u64,
    cfg: &SceneConfig,
    noise_sigma: f64,
    warp_b_to_a: impl Fn(&Point2<f64>) -> Option<Point2<f64>>,
) -> (FeatureGrid, FeatureGrid, FeatureGrid, FeatureGrid) {
    let fields = Fields::new(seed, cfg);
    let coarse_a = grid_from_fn(cfg, COARSE_STRIDE, cfg.coarse_channels, |p, out| fields.coarse.eval_into(p, out));
    let fine_a = grid_from_fn(cfg, FINE_STRIDE, cfg.fine_channels, |p, out| fields.fine.eval_into(p, out));
    let mut coarse_b = grid_from_fn(cfg, COARSE_STRIDE, cfg.coarse_channels, |q, out| match warp_b_to_a(q) {
        Some(p) => fields.coarse.eval_into(&p, out),
        None => fields.background_coarse.eval_into(q, out),
    });
    let mut fine_b = grid_from_fn(cfg, FINE_STRIDE, cfg.fine_channels, |q, out| match warp_b_to_a(q) {
        Some(p) => fields.fine.eval_into(&p, out),
        None => fields.background_fine.eval_into(q, out),
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(NOISE_STREAM);
    add_noise(&mut coarse_b, noise_sigma, &mut rng);
    add_noise(&mut fine_b, noise_sigma, &mut rng);
    (coarse_a, coarse_b, fine_a, fine_b)
}

/// Homography for a zoom-out by `scale_ratio` and in-plane rotation about the
/// image centre, followed by a translation.
pub fn planar_homography(params: &PlanarParams, width: usize, height: usize) -> Result<Homography> {
    if !(params.scale_ratio >= 1.0) {
        return Err(invalid(format!("scale_ratio must be ≥ 1, got {}", params.scale_ratio)));
    }
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let s = 1.0 / params.scale_ratio;
    let (sin, cos) = params.rotation_deg.to_radians().sin_cos();
    let to_origin = Matrix3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
    let rot_scale = Matrix3::new(s * cos, -s * sin, 0.0, s * sin, s * cos, 0.0, 0.0, 0.0, 1.0);
    let back = Matrix3::new(
        1.0, 0.0, cx + params.translation[0],
        0.0, 1.0, cy + params.translation[1],
        0.0, 0.0, 1.0,
    );
    Homography::new(back * rot_scale * to_origin)
}

/// Planar pair from explicit scale/rotation/translation parameters.
pub fn make_planar_pair(seed: u64, params: &PlanarParams, cfg: &SceneConfig) -> Result<ScenePair> {
    cfg.validate()?;
    let h = planar_homography(params, cfg.width, cfg.height)?;
    let mut pair = pair_from_homography(seed, h, params.noise_sigma, cfg)?;
    pair.meta.params = PairParams::Planar(params.clone());
    pair.meta.scale_ratio = params.scale_ratio;
    pair.meta.bucket = ScaleBucket::from_ratio(params.scale_ratio);
    Ok(pair)
}

/// Planar pair for an arbitrary A→B homography.
pub fn pair_from_homography(seed: u64, h: Homography, noise_sigma: f64, cfg: &SceneConfig) -> Result<ScenePair> {
    cfg.validate()?;
    if noise_sigma < 0.0 {
        return Err(invalid("noise_sigma must be non-negative"));
    }
    let h_inv = h.inverse();
    let (coarse_a, coarse_b, fine_a, fine_b) = build_pair(seed, cfg, noise_sigma, |q| h_inv.apply(q).ok());
    let center = Point2::new(cfg.width as f64 / 2.0, cfg.height as f64 / 2.0);
    let ratio = local_scale_ratio(|q| h_inv.apply(q).ok(), &center);
    Ok(ScenePair {
        geometry: PairGeometry::Planar { h, width: cfg.width, height: cfg.height },
        coarse_a,
        coarse_b,
        fine_a,
        fine_b,
        meta: PairMeta {
            seed,
            generator: GENERATOR_NAME.into(),
            params: PairParams::Homography { h: h.to_row_major(), noise_sigma },
            scene: cfg.clone(),
            scale_ratio: ratio,
            bucket: ScaleBucket::from_ratio(ratio),
        },
    })
}

/// Linear magnification between views at `q` (in B), folded to be ≥ 1.
fn local_scale_ratio(warp_b_to_a: impl Fn(&Point2<f64>) -> Option<Point2<f64>>, q: &Point2<f64>) -> f64 {
    let eps = 0.5;
    let px = warp_b_to_a(&Point2::new(q.x + eps, q.y));
    let mx = warp_b_to_a(&Point2::new(q.x - eps, q.y));
    let py = warp_b_to_a(&Point2::new(q.x, q.y + eps));
    let my = warp_b_to_a(&Point2::new(q.x, q.y - eps));
    let (Some(px), Some(mx), Some(py), Some(my)) = (px, mx, py, my) else {
        return 1.0;
    };
    let jx = (px - mx) / (2.0 * eps);
    let jy = (py - my) / (2.0 * eps);
    let det = (jx.x * jy.y - jx.y * jy.x).abs();
    let m = det.sqrt();
    if m <= 0.0 || !m.is_finite() {
        return 1.0;
    }
    m.max(1.0 / m)
}

fn intrinsics(focal: f64, width: usize, height: usize) -> Matrix3<f64> {
    Matrix3::new(focal, 0.0, width as f64 / 2.0, 0.0, focal, height as f64 / 2.0, 0.0, 0.0, 1.0)
}

fn render_depth(frame_k: &Matrix3<f64>, r: &Matrix3<f64>, t: &Vector3<f64>, surface: &Surface, cfg: &SceneConfig) -> Tensor {
    let center = -r.transpose() * t;
    let k_inv = frame_k.try_inverse().expect("validated intrinsics");
    let mut depth = Tensor::zeros(&[cfg.height, cfg.width]);
    for v in 0..cfg.height {
        for u in 0..cfg.width {
            let dir = r.transpose() * (k_inv * Vector3::new(u as f64 + 0.5, v as f64 + 0.5, 1.0));
            if let Some(x) = surface.intersect(&center, &dir) {
                let z = (r * x + t).z;
                if z > 0.0 {
                    depth.set(&[v, u], z as f32);
                }
            }
        }
    }
    depth
}

/// Calibrated pair observing a synthetic surface.
pub fn make_3d_pair(seed: u64, params: &PosedParams, cfg: &SceneConfig) -> Result<ScenePair> {
    cfg.validate()?;
    params.depth.validate()?;
    if !(params.zoom >= 1.0) || params.focal <= 0.0 || params.noise_sigma < 0.0 {
        return Err(invalid("zoom must be ≥ 1, focal positive, noise non-negative"));
    }
    let k = intrinsics(params.focal, cfg.width, cfg.height);
    let base = params.depth.base_depth();
    let center_b = Vector3::new(params.lateral[0], params.lateral[1], base * (1.0 - 1.0 / params.zoom));
    let axis = Vector3::from(params.rotation_deg);
    let r_b = geometry::rotation_from_axis_angle(&axis, axis.norm().to_radians());
    let t_b = -r_b * center_b;
    let surface = Surface { profile: &params.depth, k_a: k };

    let depth_a = render_depth(&k, &Matrix3::identity(), &Vector3::zeros(), &surface, cfg);
    let depth_b = render_depth(&k, &r_b, &t_b, &surface, cfg);
    let frame_a = CameraFrame::new(k, Matrix3::identity(), Vector3::zeros(), depth_a)?;
    let frame_b = CameraFrame::new(k, r_b, t_b, depth_b)?;

    let origin_b = camera_center(&frame_b);
    let warp = |q: &Point2<f64>| -> Option<Point2<f64>> {
        let x = surface.intersect(&origin_b, &pixel_ray(&frame_b, q))?;
        frame_a.project_world(&x).map(|(p, _)| p)
    };
    let (coarse_a, coarse_b, fine_a, fine_b) = build_pair(seed, cfg, params.noise_sigma, warp);
    let ratio = local_scale_ratio(warp, &Point2::new(cfg.width as f64 / 2.0, cfg.height as f64 / 2.0));

    Ok(ScenePair {
        geometry: PairGeometry::Posed { a: frame_a, b: frame_b },
        coarse_a,
        coarse_b,
        fine_a,
        fine_b,
        meta: PairMeta {
            seed,
            generator: GENERATOR_NAME.into(),
            params: PairParams::Posed(params.clone()),
            scene: cfg.clone(),
            scale_ratio: ratio,
            bucket: ScaleBucket::from_ratio(ratio),
        },
    })
}

/// Cosine similarity between two descriptors.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let d = crate::numerics::dot(a, b);
    let na = crate::numerics::dot(a, a).sqrt();
    let nb = crate::numerics::dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        d / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::projected_distance;

    fn cfg() -> SceneConfig {
        SceneConfig::default()
    }

    #[test]
    fn identity_pair_has_identical_grids() {
        let pair = make_planar_pair(7, &PlanarParams::default(), &cfg()).unwrap();
        assert_eq!(pair.coarse_a, pair.coarse_b);
        assert_eq!(pair.fine_a, pair.fine_b);
        assert_eq!(pair.meta.scale_ratio, 1.0);
        for i in 0..pair.coarse_a.len() {
            let c = pair.coarse_a.cell_center(i);
            let q = pair.geometry.warp_a_to_b(&c);
            assert!(q.valid);
            assert_eq!(pair.coarse_b.cell_of(&q.point), Some(i));
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let p = PlanarParams { scale_ratio: 1.7, rotation_deg: 12.0, translation: [1.5, -2.0], noise_sigma: 0.05 };
        let a = make_planar_pair(99, &p, &cfg()).unwrap();
        let b = make_planar_pair(99, &p, &cfg()).unwrap();
        assert_eq!(a.coarse_b, b.coarse_b);
        assert_eq!(a.fine_b, b.fine_b);
        let c = make_planar_pair(100, &p, &cfg()).unwrap();
        assert_ne!(a.coarse_a, c.coarse_a);
    }

    #[test]
    fn rejects_scale_below_one() {
        let p = PlanarParams { scale_ratio: 0.9, ..Default::default() };
        assert!(make_planar_pair(1, &p, &cfg()).is_err());
    }

    #[test]
    fn zoom_two_back_projects_with_double_spacing() {
        let p = PlanarParams { scale_ratio: 2.0, ..Default::default() };
        let pair = make_planar_pair(3, &p, &cfg()).unwrap();
        let g = &pair.coarse_b;
        let a0 = pair.geometry.warp_b_to_a(&g.cell_center(3 * 8 + 3)).point;
        let a1 = pair.geometry.warp_b_to_a(&g.cell_center(3 * 8 + 4)).point;
        assert!(((a1 - a0).norm() - 16.0).abs() < 1e-9);
    }

    #[test]
    fn noise_is_bounded() {
        let clean = make_planar_pair(5, &PlanarParams { scale_ratio: 1.3, ..Default::default() }, &cfg()).unwrap();
        let sigma = 0.05;
        let noisy = make_planar_pair(
            5,
            &PlanarParams { scale_ratio: 1.3, noise_sigma: sigma, ..Default::default() },
            &cfg(),
        )
        .unwrap();
        let diff = clean.coarse_b.tensor().max_abs_diff(noisy.coarse_b.tensor());
        assert!(diff > 0.0 && diff as f64 <= 3.0 * sigma + 1e-6);
        assert_eq!(clean.coarse_a, noisy.coarse_a);
    }

    #[test]
    fn true_correspondences_beat_random_pairs() {
        let pair = make_planar_pair(11, &PlanarParams { scale_ratio: 1.0, rotation_deg: 20.0, ..Default::default() }, &cfg()).unwrap();
        let (a, b) = (&pair.coarse_a, &pair.coarse_b);
        let mut rand_sims = Vec::new();
        for i in 0..a.len() {
            for j in 0..b.len() {
                rand_sims.push(cosine(a.feature(i), b.feature(j)));
            }
        }
        let mean = rand_sims.iter().sum::<f64>() / rand_sims.len() as f64;
        let sd = (rand_sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / rand_sims.len() as f64).sqrt();
        // exact correspondences: field evaluated at the warped centre
        let fields = Fields::new(11, &cfg());
        for j in 0..b.len() {
            let q = b.cell_center(j);
            let proj = pair.geometry.warp_b_to_a(&q);
            if !proj.valid {
                continue;
            }
            let fa = fields.coarse.eval(&proj.point);
            assert!(cosine(&fa, b.feature(j)) > mean + 3.0 * sd);
        }
    }

    #[test]
    fn forward_translation_lands_in_bucket_two_three() {
        let params = PosedParams { zoom: 2.5, ..Default::default() };
        let pair = make_3d_pair(4, &params, &cfg()).unwrap();
        assert_eq!(pair.meta.bucket, ScaleBucket::TwoToThree);
        assert!((pair.meta.scale_ratio - 2.5).abs() < 0.25);
    }

    #[test]
    fn zero_pose_offset_gives_identity_correspondences() {
        let pair = make_3d_pair(4, &PosedParams::default(), &cfg()).unwrap();
        assert_eq!(pair.coarse_a, pair.coarse_b);
        let PairGeometry::Posed { a, b } = &pair.geometry else { panic!() };
        let p = Point2::new(20.0, 30.0);
        assert!(projected_distance(a, b, &p, &p) < 1e-9);
    }

    #[test]
    fn frontal_plane_matches_planar_pair() {
        let params = PosedParams {
            depth: DepthProfile::frontal(8.0),
            rotation_deg: [1.0, -2.0, 6.0],
            lateral: [0.4, -0.3],
            zoom: 1.4,
            noise_sigma: 0.02,
            ..Default::default()
        };
        let posed = make_3d_pair(21, &params, &cfg()).unwrap();
        let PairGeometry::Posed { a, b } = &posed.geometry else { panic!() };
        let (r, t) = geometry::relative_pose(a, b);
        let h = geometry::plane_homography(a.k(), b.k(), &r, &t, &Vector3::z(), 8.0).unwrap();
        let planar = pair_from_homography(21, h, 0.02, &cfg()).unwrap();
        assert_eq!(posed.coarse_a, planar.coarse_a);
        assert!(posed.coarse_b.tensor().max_abs_diff(planar.coarse_b.tensor()) < 1e-4);
        assert!(posed.fine_b.tensor().max_abs_diff(planar.fine_b.tensor()) < 1e-4);
        for i in 0..posed.coarse_a.len() {
            let c = posed.coarse_a.cell_center(i);
            let pp = posed.geometry.warp_a_to_b(&c);
            let hp = planar.geometry.warp_a_to_b(&c);
            if pp.valid && hp.valid {
                assert!((pp.point - hp.point).norm() < 1e-6);
            }
        }
        assert!((posed.meta.scale_ratio - planar.meta.scale_ratio).abs() < 1e-6);
    }

    #[test]
    fn projection_is_inverse_consistent() {
        let params = PosedParams {
            depth: DepthProfile::Plane { normal: [0.1, -0.05, 1.0], distance: 9.0 },
            rotation_deg: [2.0, 3.0, -4.0],
            lateral: [0.5, 0.2],
            zoom: 1.3,
            ..Default::default()
        };
        let pair = make_3d_pair(8, &params, &cfg()).unwrap();
        let mut checked = 0;
        for y in (2..62).step_by(3) {
            for x in (2..62).step_by(3) {
                let p = Point2::new(x as f64 + 0.25, y as f64 + 0.75);
                let fwd = pair.geometry.warp_a_to_b(&p);
                if !fwd.valid {
                    continue;
                }
                let back = pair.geometry.warp_b_to_a(&fwd.point);
                if back.valid {
                    assert!((back.point - p).norm() < 0.5);
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn step_profile_produces_occlusions() {
        let params = PosedParams {
            depth: DepthProfile::Step { near: 6.0, far: 12.0, split_x: 32.0 },
            lateral: [1.5, 0.0],
            ..Default::default()
        };
        let pair = make_3d_pair(2, &params, &cfg()).unwrap();
        let invalid = (0..64)
            .flat_map(|y| (0..64).map(move |x| Point2::new(x as f64 + 0.5, y as f64 + 0.5)))
            .filter(|p| !pair.geometry.warp_a_to_b(p).valid)
            .count();
        assert!(invalid > 0);
    }
}
