//! Sub-pixel refinement of patch-level proposals on the 1/2 feature maps.
//!
//! Proposals are grouped by the patch on the "one" side of the winning
//! assignment direction. The "many" side stays fixed at its patch centres;
//! the shared patch is searched in a window that is upsampled by the
//! estimated scale, after one self/cross attention layer between the fixed
//! centre features and the window features. Positions come from the
//! expectation of a softmax heatmap, which also yields a variance.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Point2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{MatchSet, ScaleEstimate};
use crate::cfi::{take_param, AttentionKind, AttentionLayer, DEFAULT_HEADS};
use crate::error::{invalid, shape, Error, Result};
use crate::features::{FeatureGrid, COARSE_STRIDE};
use crate::numerics::{bilinear_sample, dot, softmax_slice, Tensor};

pub const DEFAULT_WINDOW: usize = 5;
pub const FINE_DIM: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Window size `w` in fine texels; odd.
    pub window: usize,
    /// Heatmap temperature on unit-normalised features; `None` means `0.5/√c`.
    pub temperature: Option<f64>,
    /// Bounds on the integer upsampling factor of the search window.
    pub min_zoom: usize,
    pub max_zoom: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { window: DEFAULT_WINDOW, temperature: None, min_zoom: 2, max_zoom: 4 }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(invalid(format!("refine window must be odd, got {}", self.window)));
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0) {
                return Err(invalid(format!("heatmap temperature must be positive, got {t}")));
            }
        }
        if self.min_zoom == 0 || self.max_zoom < self.min_zoom {
            return Err(invalid("zoom bounds must satisfy 1 ≤ min_zoom ≤ max_zoom"));
        }
        Ok(())
    }
}

/// One self and one cross attention layer at the fine width.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineWeights {
    pub dim: usize,
    pub heads: usize,
    pub self_layer: AttentionLayer,
    pub cross_layer: AttentionLayer,
}

impl RefineWeights {
    pub fn identity(dim: usize) -> Self {
        Self { dim, heads: DEFAULT_HEADS, self_layer: AttentionLayer::zeros(dim), cross_layer: AttentionLayer::zeros(dim) }
    }

    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(12);
        let self_layer = AttentionLayer::seeded(FINE_DIM, &mut rng);
        let cross_layer = AttentionLayer::seeded(FINE_DIM, &mut rng);
        Self { dim: FINE_DIM, heads: DEFAULT_HEADS, self_layer, cross_layer }
    }

    pub fn export(&self, out: &mut Vec<(String, Tensor)>) {
        out.push(("refine.meta.heads".into(), Tensor::new(vec![1], vec![self.heads as f32]).expect("1")));
        self.self_layer.export("refine.self", out);
        self.cross_layer.export("refine.cross", out);
    }

    pub fn import(params: &mut BTreeMap<String, Tensor>) -> Result<Self> {
        let heads = take_param(params, "refine.meta.heads", &[1])?.data()[0] as usize;
        let dim = params
            .get("refine.self.wq")
            .map(|t| t.shape()[0])
            .ok_or_else(|| Error::Format("missing parameter refine.self.wq".into()))?;
        Ok(Self {
            dim,
            heads,
            self_layer: AttentionLayer::import("refine.self", dim, params)?,
            cross_layer: AttentionLayer::import("refine.cross", dim, params)?,
        })
    }
}

/// Zooms each `w×w` patch about its centre by `s ≥ 1` with bilinear
/// resampling; the output keeps the `w×w×c` shape.
pub fn scale_align(patches: &Tensor, s: f64) -> Result<Tensor> {
    if !(s >= 1.0) {
        return Err(invalid(format!("scale must be ≥ 1, got {s}")));
    }
    let [n, h, w, c] = *patches.shape() else {
        return Err(shape(format!("patches must be n×w×w×c, got {:?}", patches.shape())));
    };
    if h != w || w == 0 {
        return Err(shape(format!("patches must be square, got {h}×{w}")));
    }
    let centre = (w as f64 - 1.0) / 2.0;
    let points: Vec<(f64, f64)> = (0..w * w)
        .map(|k| {
            let (v, u) = ((k / w) as f64, (k % w) as f64);
            (centre + (u - centre) / s, centre + (v - centre) / s)
        })
        .collect();
    let per_patch = w * w * c;
    let mut out = Vec::with_capacity(patches.numel());
    for p in 0..n {
        let patch = Tensor::new(vec![w, w, c], patches.data()[p * per_patch..(p + 1) * per_patch].to_vec())?;
        out.extend(bilinear_sample(&patch, &points)?.into_data());
    }
    Tensor::new(vec![n, w, w, c], out)
}

/// Heatmap expectation over a square window.
#[derive(Debug, Clone, PartialEq)]
pub struct Regression {
    /// Expected position relative to the window centre, in window cells.
    pub offset: (f64, f64),
    /// Spread of the heatmap around its expectation, in squared cells.
    pub variance: f64,
    pub heatmap: Vec<f64>,
}

/// `softmax(⟨centre, window[u,v]⟩ / temperature)` over the window, then its
/// mean position and variance. `window` is `n×n×c`.
pub fn expectation_regress(centre: &[f32], window: &Tensor, temperature: f64) -> Result<Regression> {
    let [n, n2, c] = *window.shape() else {
        return Err(shape(format!("window must be n×n×c, got {:?}", window.shape())));
    };
    if n != n2 || n == 0 || c != centre.len() {
        return Err(shape(format!("window {:?} vs centre width {}", window.shape(), centre.len())));
    }
    if !(temperature > 0.0) {
        return Err(invalid("temperature must be positive"));
    }
    let logits: Vec<f64> = (0..n * n).map(|k| dot(centre, window.row(k)) / temperature).collect();
    let heatmap = softmax_slice(&logits);
    let mid = (n as f64 - 1.0) / 2.0;
    let coord = |k: usize| ((k % n) as f64 - mid, (k / n) as f64 - mid);
    let (mut ex, mut ey) = (0.0, 0.0);
    for (k, &h) in heatmap.iter().enumerate() {
        let (x, y) = coord(k);
        ex += h * x;
        ey += h * y;
    }
    let variance = heatmap
        .iter()
        .enumerate()
        .map(|(k, &h)| {
            let (x, y) = coord(k);
            h * ((x - ex).powi(2) + (y - ey).powi(2))
        })
        .sum();
    Ok(Regression { offset: (ex, ey), variance, heatmap })
}

/// A refined correspondence in full-resolution pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinedMatch {
    pub i: usize,
    pub j: usize,
    pub pa: Point2<f64>,
    pub pb: Point2<f64>,
    pub confidence: f32,
    /// Heatmap variance in squared pixels of the searched image.
    pub variance: f64,
    /// 0: `pa` fixed and `pb` regressed; 1: the reverse.
    pub direction: usize,
}

impl RefinedMatch {
    pub fn fixed(&self) -> Point2<f64> {
        if self.direction == 0 {
            self.pa
        } else {
            self.pb
        }
    }

    pub fn regressed(&self) -> Point2<f64> {
        if self.direction == 0 {
            self.pb
        } else {
            self.pa
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RefineOutput {
    pub matches: Vec<RefinedMatch>,
    /// Proposals dropped because their search window left the fine map.
    pub discarded: usize,
}

fn normalise_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = dot(row, row).sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
        }
    }
    out
}

fn coarse_centre(index: usize, grid_width: usize) -> Point2<f64> {
    let s = COARSE_STRIDE as f64;
    Point2::new(((index % grid_width) as f64 + 0.5) * s, ((index / grid_width) as f64 + 0.5) * s)
}

/// Integer upsampling factor of the search window for a scale estimate.
pub fn zoom_factor(scale: &ScaleEstimate, cfg: &RefineConfig) -> usize {
    (scale.linear().round() as usize).clamp(cfg.min_zoom, cfg.max_zoom)
}

pub fn refine_matches(
    proposals: &MatchSet,
    fine_a: &FeatureGrid,
    fine_b: &FeatureGrid,
    scale: &ScaleEstimate,
    weights: &RefineWeights,
    cfg: &RefineConfig,
) -> Result<RefineOutput> {
    cfg.validate()?;
    if fine_a.channels() != weights.dim || fine_b.channels() != weights.dim {
        return Err(shape(format!(
            "refinement width {} vs fine features {} / {}",
            weights.dim,
            fine_a.channels(),
            fine_b.channels()
        )));
    }
    let coarse_w_a = fine_a.width() * fine_a.stride() / COARSE_STRIDE;
    let coarse_w_b = fine_b.width() * fine_b.stride() / COARSE_STRIDE;
    let coarse_n_a = coarse_w_a * (fine_a.height() * fine_a.stride() / COARSE_STRIDE);
    let coarse_n_b = coarse_w_b * (fine_b.height() * fine_b.stride() / COARSE_STRIDE);
    if let Some(m) = proposals.matches.iter().find(|m| m.i >= coarse_n_a || m.j >= coarse_n_b) {
        return Err(invalid(format!("proposal ({}, {}) outside the patch grids", m.i, m.j)));
    }

    let k = proposals.direction.unwrap_or(scale.index);
    let (fixed_map, search_map, fixed_w, search_w) = if k == 0 {
        (fine_a, fine_b, coarse_w_a, coarse_w_b)
    } else {
        (fine_b, fine_a, coarse_w_b, coarse_w_a)
    };
    let zoom = zoom_factor(scale, cfg);
    let half = (cfg.window / 2) as f64;
    let side = (cfg.window - 1) * zoom + 1;
    let step = 1.0 / zoom as f64;
    let temperature = cfg.temperature.unwrap_or(0.5 / (weights.dim as f64).sqrt());
    let (heads, kind) = (weights.heads, AttentionKind::Softmax);

    // group proposals by their patch on the searched side
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, m) in proposals.matches.iter().enumerate() {
        let (_, searched) = if k == 0 { (m.i, m.j) } else { (m.j, m.i) };
        groups.entry(searched).or_default().push(idx);
    }

    let mut results: Vec<Option<RefinedMatch>> = vec![None; proposals.len()];
    let mut discarded = 0;
    for (searched, members) in groups {
        let centre = coarse_centre(searched, search_w);
        let (tx, ty) = search_map.to_texel(&centre);
        let inside = tx - half >= 0.0
            && ty - half >= 0.0
            && tx + half <= (search_map.width() - 1) as f64
            && ty + half <= (search_map.height() - 1) as f64;
        if !inside {
            discarded += members.len();
            continue;
        }
        let points: Vec<(f64, f64)> = (0..side * side)
            .map(|q| (tx - half + (q % side) as f64 * step, ty - half + (q / side) as f64 * step))
            .collect();
        let window = bilinear_sample(search_map.tensor(), &points)?;

        let fixed_points: Vec<Point2<f64>> = members
            .iter()
            .map(|&idx| {
                let m = proposals.matches[idx];
                coarse_centre(if k == 0 { m.i } else { m.j }, fixed_w)
            })
            .collect();
        let texels: Vec<(f64, f64)> = fixed_points
            .iter()
            .map(|p| {
                let (x, y) = fixed_map.to_texel(p);
                (x.clamp(0.0, (fixed_map.width() - 1) as f64), y.clamp(0.0, (fixed_map.height() - 1) as f64))
            })
            .collect();
        let fixed = bilinear_sample(fixed_map.tensor(), &texels)?;

        let fixed = weights.self_layer.forward(&fixed, &fixed, heads, kind)?;
        let window = weights.self_layer.forward(&window, &window, heads, kind)?;
        let fixed_x = weights.cross_layer.forward(&fixed, &window, heads, kind)?;
        let window_x = weights.cross_layer.forward(&window, &fixed, heads, kind)?;

        let fixed_n = normalise_rows(&fixed_x);
        let window_n = normalise_rows(&window_x).reshape(&[side, side, weights.dim])?;
        let px_per_cell = search_map.stride() as f64 * step;
        for (slot, &idx) in members.iter().enumerate() {
            let reg = expectation_regress(fixed_n.row(slot), &window_n, temperature)?;
            let found = Point2::new(centre.x + reg.offset.0 * px_per_cell, centre.y + reg.offset.1 * px_per_cell);
            let m = proposals.matches[idx];
            let (pa, pb) = if k == 0 { (fixed_points[slot], found) } else { (found, fixed_points[slot]) };
            results[idx] = Some(RefinedMatch {
                i: m.i,
                j: m.j,
                pa,
                pb,
                confidence: m.confidence,
                variance: reg.variance * px_per_cell * px_per_cell,
                direction: k,
            });
        }
    }
    Ok(RefineOutput { matches: results.into_iter().flatten().collect(), discarded })
}

/// Distinct patches referenced on each side, for reporting.
pub fn patch_coverage(matches: &[RefinedMatch]) -> (usize, usize) {
    let a: BTreeSet<usize> = matches.iter().map(|m| m.i).collect();
    let b: BTreeSet<usize> = matches.iter().map(|m| m.j).collect();
    (a.len(), b.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::Match;
    use crate::features::FINE_STRIDE;
    use crate::synthscene::{make_planar_pair, PlanarParams, SceneConfig};

    #[test]
    fn scale_align_identity_and_constant() {
        let p = Tensor::from_fn(&[2, 5, 5, 3], |i| (i as f32 * 0.37).sin());
        assert_eq!(scale_align(&p, 1.0).unwrap(), p);
        let c = Tensor::filled(&[1, 5, 5, 2], 0.75);
        assert!(scale_align(&c, 2.7).unwrap().data().iter().all(|&v| (v - 0.75).abs() < 1e-6));
        assert!(scale_align(&p, 0.9).is_err());
    }

    #[test]
    fn scale_align_ramp() {
        let ramp = Tensor::from_fn(&[1, 5, 5, 1], |k| (k % 5) as f32);
        let z = scale_align(&ramp, 2.0).unwrap();
        let expected = [1.0, 1.5, 2.0, 2.5, 3.0];
        for v in 0..5 {
            for (u, e) in expected.iter().enumerate() {
                assert!((z.at(&[0, v, u, 0]) - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn uniform_window_regresses_to_centre() {
        let w = Tensor::filled(&[5, 5, 3], 1.0);
        let r = expectation_regress(&[1.0, 0.0, 0.0], &w, 0.1).unwrap();
        assert!(r.offset.0.abs() < 1e-12 && r.offset.1.abs() < 1e-12);
        // variance of a uniform 5×5 grid: 2 · (4+1+0+1+4)/5 = 4
        assert!((r.variance - 4.0).abs() < 1e-9);
    }

    #[test]
    fn delta_heatmap_at_corner() {
        let mut w = Tensor::zeros(&[5, 5, 2]);
        w.set(&[0, 4, 0], 1.0);
        let r = expectation_regress(&[1000.0, 0.0], &w, 1.0).unwrap();
        assert!((r.offset.0 - 2.0).abs() < 1e-9 && (r.offset.1 + 2.0).abs() < 1e-9);
        assert!(r.variance < 1e-9);
    }

    #[test]
    fn two_equal_peaks() {
        let mut w = Tensor::zeros(&[5, 5, 1]);
        w.set(&[2, 1, 0], 1.0);
        w.set(&[2, 3, 0], 1.0);
        let r = expectation_regress(&[1e4], &w, 1.0).unwrap();
        assert!(r.offset.0.abs() < 1e-9 && r.offset.1.abs() < 1e-9);
        assert!((r.variance - 1.0).abs() < 1e-9);
    }

    #[test]
    fn offsets_bounded_by_half_window() {
        let w = Tensor::from_fn(&[5, 5, 4], |i| ((i * 13 % 7) as f32 - 3.0) * 2.0);
        for t in [0.01, 0.1, 1.0, 10.0] {
            let r = expectation_regress(&[1.0, -1.0, 0.5, 2.0], &w, t).unwrap();
            assert!(r.offset.0.abs() <= 2.0 && r.offset.1.abs() <= 2.0 && r.variance >= 0.0);
        }
    }

    fn identity_pair() -> crate::synthscene::ScenePair {
        make_planar_pair(7, &PlanarParams::default(), &SceneConfig::default()).unwrap()
    }

    fn all_identity_proposals(n: usize) -> MatchSet {
        MatchSet::new((0..n).map(|i| Match { i, j: i, confidence: 1.0 }).collect(), Some(0))
    }

    #[test]
    fn identity_pair_refines_to_centre() {
        let pair = identity_pair();
        let out = refine_matches(
            &all_identity_proposals(64),
            &pair.fine_a,
            &pair.fine_b,
            &ScaleEstimate::unit(),
            &RefineWeights::seeded(1),
            &RefineConfig::default(),
        )
        .unwrap();
        // the outer ring of patches has windows crossing the border
        assert_eq!(out.matches.len(), 36);
        assert_eq!(out.discarded, 28);
        let good = out.matches.iter().filter(|m| (m.pb - m.pa).norm() < 0.25).count();
        assert!(good as f64 >= 0.95 * out.matches.len() as f64, "{good} of {}", out.matches.len());
    }

    #[test]
    fn corner_proposal_is_discarded() {
        let pair = identity_pair();
        let props = MatchSet::new(
            vec![Match { i: 0, j: 0, confidence: 0.9 }, Match { i: 27, j: 27, confidence: 0.9 }],
            Some(0),
        );
        let out = refine_matches(
            &props,
            &pair.fine_a,
            &pair.fine_b,
            &ScaleEstimate::unit(),
            &RefineWeights::seeded(1),
            &RefineConfig::default(),
        )
        .unwrap();
        assert_eq!(out.matches.len(), 1);
        assert_eq!(out.discarded, 1);
        let empty = refine_matches(
            &MatchSet::default(),
            &pair.fine_a,
            &pair.fine_b,
            &ScaleEstimate::unit(),
            &RefineWeights::seeded(1),
            &RefineConfig::default(),
        )
        .unwrap();
        assert!(empty.matches.is_empty());
    }

    #[test]
    fn reverse_direction_regresses_in_a() {
        let pair = identity_pair();
        let mut props = all_identity_proposals(64);
        props.direction = Some(1);
        let out = refine_matches(
            &props,
            &pair.fine_a,
            &pair.fine_b,
            &ScaleEstimate::unit(),
            &RefineWeights::identity(FINE_DIM),
            &RefineConfig::default(),
        )
        .unwrap();
        assert!(out.matches.iter().all(|m| m.direction == 1 && m.pb == m.fixed()));
        assert_eq!(out.matches[0].pb, Point2::new(12.0, 12.0));
        assert_eq!(pair.fine_a.stride(), FINE_STRIDE);
    }

    #[test]
    fn weights_round_trip() {
        let w = RefineWeights::seeded(3);
        let mut entries = Vec::new();
        w.export(&mut entries);
        let mut map: BTreeMap<_, _> = entries.into_iter().collect();
        assert_eq!(RefineWeights::import(&mut map).unwrap(), w);
        assert!(map.is_empty());
    }
}
