//! Ground-truth patch labels from exact pair geometry.
//!
//! Patch centroids of each image are projected into the other image and
//! bucketed by floor division; every centroid landing in a patch makes a
//! positive with that patch, so many-to-one assignments survive.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Point2;
use serde::{Deserialize, Serialize};

use crate::assignment::{Match, MatchSet};
use crate::error::{invalid, Result};
use crate::features::cell_index;
use crate::refine::RefinedMatch;
use crate::synthscene::PairGeometry;

/// Positives of the adaptive assignment matrix plus ground-truth masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLabels {
    pub patch_size: usize,
    /// Patch grid of A as `[width, height]`.
    pub grid_a: [usize; 2],
    pub grid_b: [usize; 2],
    /// A centroid `i` lands in B patch `j`.
    pub forward: Vec<(usize, usize)>,
    /// B centroid `j` lands in A patch `i`, stored as `(i, j)`.
    pub backward: Vec<(usize, usize)>,
    /// Union of both directions, sorted.
    pub positives: Vec<(usize, usize)>,
    /// Centroid projection of the patch is valid.
    pub cov_a: Vec<bool>,
    pub cov_b: Vec<bool>,
}

impl GroundTruthLabels {
    pub fn len_a(&self) -> usize {
        self.grid_a[0] * self.grid_a[1]
    }

    pub fn len_b(&self) -> usize {
        self.grid_b[0] * self.grid_b[1]
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.positives.binary_search(&(i, j)).is_ok()
    }

    /// Dense `N_A × N_B` boolean matrix, row-major.
    pub fn dense(&self) -> Vec<bool> {
        let nb = self.len_b();
        let mut out = vec![false; self.len_a() * nb];
        for &(i, j) in &self.positives {
            out[i * nb + j] = true;
        }
        out
    }

    /// Direction-resolved label set: `k = 0` is the A→B projection (each A
    /// patch at most once), `k = 1` the B→A projection.
    pub fn one_way(&self, k: usize) -> MatchSet {
        let src = if k == 0 { &self.forward } else { &self.backward };
        MatchSet::new(src.iter().map(|&(i, j)| Match { i, j, confidence: 1.0 }).collect(), Some(k))
    }

    pub fn union(&self) -> MatchSet {
        MatchSet::new(self.positives.iter().map(|&(i, j)| Match { i, j, confidence: 1.0 }).collect(), None)
    }
}

fn centroid(index: usize, grid_w: usize, patch: usize) -> Point2<f64> {
    let p = patch as f64;
    Point2::new(((index % grid_w) as f64 + 0.5) * p, ((index / grid_w) as f64 + 0.5) * p)
}

pub fn generate_labels(geometry: &PairGeometry, patch_size: usize) -> Result<GroundTruthLabels> {
    if patch_size == 0 {
        return Err(invalid("patch size must be positive"));
    }
    let (w, h) = (geometry.width(), geometry.height());
    let grid = [w / patch_size, h / patch_size];
    let n = grid[0] * grid[1];
    let mut forward = Vec::new();
    let mut backward = Vec::new();
    let mut cov_a = vec![false; n];
    let mut cov_b = vec![false; n];
    for idx in 0..n {
        let c = centroid(idx, grid[0], patch_size);
        if let Some(q) = geometry.warp_a_to_b(&c).valid_point() {
            cov_a[idx] = true;
            if let Some(j) = cell_index(&q, patch_size, grid[0], grid[1]) {
                forward.push((idx, j));
            }
        }
        if let Some(p) = geometry.warp_b_to_a(&c).valid_point() {
            cov_b[idx] = true;
            if let Some(i) = cell_index(&p, patch_size, grid[0], grid[1]) {
                backward.push((i, idx));
            }
        }
    }
    let positives: BTreeSet<(usize, usize)> = forward.iter().chain(&backward).copied().collect();
    Ok(GroundTruthLabels {
        patch_size,
        grid_a: grid,
        grid_b: grid,
        forward,
        backward,
        positives: positives.into_iter().collect(),
        cov_a,
        cov_b,
    })
}

/// One-to-one labels: only pairs that are each other's projection target.
pub fn mutual_nn_labels(labels: &GroundTruthLabels) -> Vec<(usize, usize)> {
    let fwd: BTreeSet<_> = labels.forward.iter().copied().collect();
    labels.backward.iter().filter(|p| fwd.contains(p)).copied().collect()
}

/// Exact projection of a fixed point into the other image, `None` when
/// occluded or out of view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineTarget {
    pub source: Point2<f64>,
    pub target: Option<Point2<f64>>,
}

/// Ground-truth sub-pixel targets for patch proposals: the centre of the
/// source patch (A for `direction = 0`, B otherwise) projected exactly.
pub fn gt_matches_fine(
    proposals: &MatchSet,
    geometry: &PairGeometry,
    direction: usize,
    patch_size: usize,
) -> Vec<FineTarget> {
    let grid_w = geometry.width() / patch_size;
    proposals
        .matches
        .iter()
        .map(|m| {
            let source = centroid(if direction == 0 { m.i } else { m.j }, grid_w, patch_size);
            let proj = if direction == 0 { geometry.warp_a_to_b(&source) } else { geometry.warp_b_to_a(&source) };
            FineTarget { source, target: proj.valid_point() }
        })
        .collect()
}

/// Targets for already refined matches, projecting each fixed point.
pub fn targets_for_refined(refined: &[RefinedMatch], geometry: &PairGeometry) -> Vec<FineTarget> {
    refined
        .iter()
        .map(|m| {
            let source = m.fixed();
            let proj = if m.direction == 0 { geometry.warp_a_to_b(&source) } else { geometry.warp_b_to_a(&source) };
            FineTarget { source, target: proj.valid_point() }
        })
        .collect()
}

/// Counts `(a,b) ∧ (b,c) ⇒ (a,c)` checks over three label sets; a check is
/// skipped when the composed relation has no label support for `a` at all.
pub fn transitivity_violations(
    ab: &[(usize, usize)],
    bc: &[(usize, usize)],
    ac: &[(usize, usize)],
) -> (usize, usize) {
    let mut by_b: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(b, c) in bc {
        by_b.entry(b).or_default().push(c);
    }
    let ac_set: BTreeSet<_> = ac.iter().copied().collect();
    let a_covered: BTreeSet<usize> = ac.iter().map(|&(a, _)| a).collect();
    let (mut checked, mut violated) = (0, 0);
    for &(a, b) in ab {
        if !a_covered.contains(&a) {
            continue;
        }
        for &c in by_b.get(&b).into_iter().flatten() {
            checked += 1;
            if !ac_set.contains(&(a, c)) {
                violated += 1;
            }
        }
    }
    (checked, violated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::estimate_scale;
    use crate::geometry::Homography;
    use crate::synthscene::{planar_homography, PlanarParams};
    use nalgebra::Matrix3;

    fn planar(params: &PlanarParams) -> PairGeometry {
        PairGeometry::Planar { h: planar_homography(params, 64, 64).unwrap(), width: 64, height: 64 }
    }

    fn zoom(s: f64) -> PairGeometry {
        planar(&PlanarParams { scale_ratio: s, ..Default::default() })
    }

    #[test]
    fn identity_labels() {
        let l = generate_labels(&zoom(1.0), 8).unwrap();
        assert_eq!(l.positives, (0..64).map(|i| (i, i)).collect::<Vec<_>>());
        assert!(l.cov_a.iter().chain(&l.cov_b).all(|&c| c));
        let est = estimate_scale(&l.one_way(0), &l.one_way(1));
        assert_eq!((est.s0, est.s1), (1.0, 1.0));
    }

    #[test]
    fn double_zoom_is_many_to_one() {
        let l = generate_labels(&zoom(2.0), 8).unwrap();
        let dense = l.dense();
        // B patches in the central 4×4 block see the whole of A
        for row in 2..6 {
            for col in 2..6 {
                let j = row * 8 + col;
                let partners = (0..64).filter(|&i| dense[i * 64 + j]).count();
                assert!(partners >= 2, "B patch {j} has {partners} partners");
            }
        }
        let est = estimate_scale(&l.one_way(0), &l.one_way(1));
        assert_eq!(est.s0, 4.0);
        assert_eq!(est.index, 0);
    }

    #[test]
    fn disjoint_views_have_no_labels() {
        let g = planar(&PlanarParams { translation: [200.0, 0.0], ..Default::default() });
        let l = generate_labels(&g, 8).unwrap();
        assert!(l.positives.is_empty());
        assert!(l.cov_a.iter().chain(&l.cov_b).all(|&c| !c));
    }

    #[test]
    fn positives_come_from_centroid_projection() {
        let g = planar(&PlanarParams { scale_ratio: 1.7, rotation_deg: 23.0, translation: [3.0, -2.0], noise_sigma: 0.0 });
        let l = generate_labels(&g, 8).unwrap();
        for &(i, j) in &l.positives {
            let fa = g.warp_a_to_b(&centroid(i, 8, 8)).valid_point().and_then(|q| cell_index(&q, 8, 8, 8));
            let fb = g.warp_b_to_a(&centroid(j, 8, 8)).valid_point().and_then(|p| cell_index(&p, 8, 8, 8));
            assert!(fa == Some(j) || fb == Some(i));
        }
    }

    #[test]
    fn fine_targets() {
        let g = zoom(1.0);
        let props = MatchSet::new(vec![Match { i: 9, j: 9, confidence: 1.0 }], Some(0));
        let t = gt_matches_fine(&props, &g, 0, 8);
        assert_eq!(t[0].target, Some(Point2::new(12.0, 12.0)));

        let h = Homography::new(Matrix3::new(1.1, 0.05, 2.0, -0.02, 0.95, 1.0, 0.0, 0.0, 1.0)).unwrap();
        let g = PairGeometry::Planar { h, width: 64, height: 64 };
        let t = gt_matches_fine(&props, &g, 0, 8);
        let expected = h.apply(&Point2::new(12.0, 12.0)).unwrap();
        assert!((t[0].target.unwrap() - expected).norm() < 1e-12);

        let far = planar(&PlanarParams { translation: [60.0, 0.0], ..Default::default() });
        let props = MatchSet::new(vec![Match { i: 7, j: 7, confidence: 1.0 }], Some(0));
        assert_eq!(gt_matches_fine(&props, &far, 0, 8)[0].target, None);
    }

    #[test]
    fn aligned_triple_is_transitive_and_mutual_nn_loses_partners() {
        let ab = generate_labels(&zoom(2.0), 8).unwrap();
        let bc = generate_labels(&zoom(2.0), 8).unwrap();
        let ac = generate_labels(&zoom(4.0), 8).unwrap();
        let (checked, violated) = transitivity_violations(&ab.forward, &bc.forward, &ac.forward);
        assert!(checked > 0);
        assert_eq!(violated, 0);
        let mnn = mutual_nn_labels(&ab);
        assert!(mnn.len() < ab.positives.len());
        let (mchecked, _) = transitivity_violations(&mnn, &mutual_nn_labels(&bc), &mutual_nn_labels(&ac));
        assert!(mchecked < checked);
    }
}
