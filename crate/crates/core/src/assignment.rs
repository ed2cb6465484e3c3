//! Adaptive patch assignment: similarity, dual one-way softmax, thresholded
//! selection, scale estimation and co-visibility filtering.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::covisible::CoVisibleMap;
use crate::error::{invalid, shape, Result};
use crate::features::FeatureGrid;
use crate::numerics::{dot, softmax, Tensor};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.5;

/// `S[i][j] = ⟨F_A(i), F_B(j)⟩ / r`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub scores: Tensor,
    pub temperature: f64,
}

impl SimilarityMatrix {
    pub fn rows(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.scores.shape()[1]
    }
}

pub fn similarity(feat_a: &FeatureGrid, feat_b: &FeatureGrid, r: f64) -> Result<SimilarityMatrix> {
    if !(r > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {r}")));
    }
    if feat_a.channels() != feat_b.channels() {
        return Err(shape(format!(
            "similarity channel mismatch {} vs {}",
            feat_a.channels(),
            feat_b.channels()
        )));
    }
    let (na, nb) = (feat_a.len(), feat_b.len());
    let mut data = Vec::with_capacity(na * nb);
    for i in 0..na {
        let fa = feat_a.feature(i);
        for j in 0..nb {
            data.push((dot(fa, feat_b.feature(j)) / r) as f32);
        }
    }
    Ok(SimilarityMatrix { scores: Tensor::new(vec![na, nb], data)?, temperature: r })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    /// Patch index in A.
    pub i: usize,
    /// Patch index in B.
    pub j: usize,
    pub confidence: f32,
}

/// Patch-level matches. `direction` is `Some(k)` for one-way sets: `k = 0`
/// means each A patch appears at most once, `k = 1` each B patch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchSet {
    pub matches: Vec<Match>,
    pub direction: Option<usize>,
}

impl MatchSet {
    pub fn new(matches: Vec<Match>, direction: Option<usize>) -> Self {
        Self { matches, direction }
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.matches.iter().map(|m| (m.i, m.j))
    }

    /// Number of distinct values in column `col` (0 = A index, 1 = B index).
    pub fn distinct(&self, col: usize) -> usize {
        let set: BTreeSet<usize> = self.matches.iter().map(|m| if col == 0 { m.i } else { m.j }).collect();
        set.len()
    }
}

/// Which above-threshold entries enter `M_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Only the argmax of each softmaxed slice, if above threshold.
    #[default]
    Argmax,
    /// Every entry above threshold.
    AllAbove,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualSoftmax {
    /// Softmax over B for each A row.
    pub p0: Tensor,
    /// Softmax over A for each B column.
    pub p1: Tensor,
    pub m0: MatchSet,
    pub m1: MatchSet,
}

impl DualSoftmax {
    pub fn probs(&self, k: usize) -> &Tensor {
        if k == 0 {
            &self.p0
        } else {
            &self.p1
        }
    }

    pub fn matches(&self, k: usize) -> &MatchSet {
        if k == 0 {
            &self.m0
        } else {
            &self.m1
        }
    }
}

fn argmax(values: impl Iterator<Item = f32>) -> Option<(usize, f32)> {
    values.enumerate().fold(None, |best, (idx, v)| match best {
        Some((_, b)) if v <= b => best,
        _ => Some((idx, v)),
    })
}

/// Row and column softmax of `S`, each followed by thresholded selection.
pub fn dual_softmax_proposals(s: &SimilarityMatrix, theta_m: f64, selection: Selection) -> Result<DualSoftmax> {
    let p0 = softmax(&s.scores, 1)?;
    let p1 = softmax(&s.scores, 0)?;
    let (na, nb) = (s.rows(), s.cols());
    let theta = theta_m as f32;
    let mut m0 = Vec::new();
    let mut m1 = Vec::new();
    match selection {
        Selection::Argmax => {
            for i in 0..na {
                if let Some((j, p)) = argmax(p0.row(i).iter().copied()) {
                    if p > theta {
                        m0.push(Match { i, j, confidence: p });
                    }
                }
            }
            for j in 0..nb {
                if let Some((i, p)) = argmax((0..na).map(|i| p1.row(i)[j])) {
                    if p > theta {
                        m1.push(Match { i, j, confidence: p });
                    }
                }
            }
        }
        Selection::AllAbove => {
            for i in 0..na {
                for j in 0..nb {
                    let p = p0.row(i)[j];
                    if p > theta {
                        m0.push(Match { i, j, confidence: p });
                    }
                }
            }
            for j in 0..nb {
                for i in 0..na {
                    let p = p1.row(i)[j];
                    if p > theta {
                        m1.push(Match { i, j, confidence: p });
                    }
                }
            }
        }
    }
    Ok(DualSoftmax { p0, p1, m0: MatchSet::new(m0, Some(0)), m1: MatchSet::new(m1, Some(1)) })
}

/// Multiplicity ratios of both one-way sets and the winning direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleEstimate {
    pub s0: f64,
    pub s1: f64,
    pub s: f64,
    pub index: usize,
}

impl ScaleEstimate {
    pub fn unit() -> Self {
        Self { s0: 1.0, s1: 1.0, s: 1.0, index: 0 }
    }

    /// Linear magnification implied by the multiplicity ratio.
    pub fn linear(&self) -> f64 {
        self.s.sqrt()
    }
}

/// `|M_k|` over the number of distinct targets in `M_k`; 1 for an empty set.
pub fn multiplicity(m: &MatchSet, k: usize) -> f64 {
    if m.is_empty() {
        1.0
    } else {
        m.len() as f64 / m.distinct(1 - k) as f64
    }
}

pub fn estimate_scale(m0: &MatchSet, m1: &MatchSet) -> ScaleEstimate {
    let s0 = multiplicity(m0, 0);
    let s1 = multiplicity(m1, 1);
    ScaleEstimate { s0, s1, s: (s0 / s1).max(s1 / s0), index: usize::from(s1 > s0) }
}

/// Keeps matches whose A and B patches are both co-visible.
pub fn filter_covisible(m: &MatchSet, cov: &CoVisibleMap) -> Result<MatchSet> {
    let mut kept = Vec::with_capacity(m.len());
    for mt in &m.matches {
        let (Some(&a), Some(&b)) = (cov.mask_a.get(mt.i), cov.mask_b.get(mt.j)) else {
            return Err(invalid(format!(
                "match ({}, {}) outside masks of {} / {} patches",
                mt.i,
                mt.j,
                cov.mask_a.len(),
                cov.mask_b.len()
            )));
        };
        if a && b {
            kept.push(*mt);
        }
    }
    Ok(MatchSet::new(kept, m.direction))
}

/// Row-argmax and column-argmax passes over an external score matrix, each
/// gated by `score ≥ θ`.
pub fn external_directional(scores: &Tensor, theta: f64) -> Result<(MatchSet, MatchSet)> {
    let [na, nb] = *scores.shape() else {
        return Err(shape(format!("score matrix must be rank 2, got {:?}", scores.shape())));
    };
    let theta = theta as f32;
    let mut m0 = Vec::new();
    for i in 0..na {
        if let Some((j, v)) = argmax(scores.row(i).iter().copied()) {
            if v >= theta {
                m0.push(Match { i, j, confidence: v });
            }
        }
    }
    let mut m1 = Vec::new();
    for j in 0..nb {
        if let Some((i, v)) = argmax((0..na).map(|i| scores.row(i)[j])) {
            if v >= theta {
                m1.push(Match { i, j, confidence: v });
            }
        }
    }
    Ok((MatchSet::new(m0, Some(0)), MatchSet::new(m1, Some(1))))
}

/// Union of both argmax passes without a mutual-nearest constraint; entries
/// found by both passes appear once with the larger confidence.
pub fn proposals_from_external(scores: &Tensor, theta: f64) -> Result<MatchSet> {
    let (m0, m1) = external_directional(scores, theta)?;
    let mut merged: BTreeMap<(usize, usize), f32> = BTreeMap::new();
    for m in m0.matches.iter().chain(&m1.matches) {
        let c = merged.entry((m.i, m.j)).or_insert(m.confidence);
        *c = c.max(m.confidence);
    }
    Ok(MatchSet::new(
        merged.into_iter().map(|((i, j), confidence)| Match { i, j, confidence }).collect(),
        None,
    ))
}
