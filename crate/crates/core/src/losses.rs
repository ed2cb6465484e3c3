//! Forward evaluation of the supervision terms.

use nalgebra::Point2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::refine::RefinedMatch;

const LOG_FLOOR: f64 = 1e-12;
const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub w_cov: f64,
    pub w_match: f64,
    pub w_refine: f64,
    pub sample_fraction: f64,
    pub sample_cap: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0, w_cov: 0.5, w_match: 1.0, w_refine: 1.0, sample_fraction: 0.3, sample_cap: 2500 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) || !(self.gamma >= 0.0) {
            return Err(invalid("focal loss needs alpha in (0, 1) and gamma ≥ 0"));
        }
        if [self.w_cov, self.w_match, self.w_refine].iter().any(|w| !(*w >= 0.0)) {
            return Err(invalid("loss weights must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.sample_fraction) {
            return Err(invalid("sample_fraction must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Mean of `−α (1 − p_t)^γ log p_t` with `p_t = p` on positives and `1 − p`
/// on negatives. An empty input gives 0.
pub fn focal_loss(pred: &[f32], target: &[bool], cfg: &LossConfig) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(shape(format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    if let Some(p) = pred.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(invalid(format!("prediction {p} outside [0, 1]")));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let pt = if t { p as f64 } else { 1.0 - p as f64 };
            if pt >= 1.0 {
                0.0
            } else {
                -cfg.alpha * (1.0 - pt).powf(cfg.gamma) * pt.max(LOG_FLOOR).ln()
            }
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineLoss {
    pub value: f64,
    /// Matches with a valid target that entered the mean.
    pub count: usize,
    /// Set when no match had a valid target.
    pub empty: bool,
}

/// Mean over valid targets of `‖regressed − target‖ / max(σ², ε)`.
pub fn refine_loss(refined: &[RefinedMatch], targets: &[Option<Point2<f64>>]) -> Result<RefineLoss> {
    if refined.len() != targets.len() {
        return Err(shape(format!("{} matches vs {} targets", refined.len(), targets.len())));
    }
    let terms: Vec<f64> = refined
        .iter()
        .zip(targets)
        .filter_map(|(m, t)| t.map(|t| (m.regressed() - t).norm() / m.variance.max(VARIANCE_FLOOR)))
        .collect();
    if terms.is_empty() {
        return Ok(RefineLoss { value: 0.0, count: 0, empty: true });
    }
    Ok(RefineLoss { value: terms.iter().sum::<f64>() / terms.len() as f64, count: terms.len(), empty: false })
}

pub fn total_loss(cov: f64, matching: f64, refine: f64, cfg: &LossConfig) -> f64 {
    cfg.w_cov * cov + cfg.w_match * matching + cfg.w_refine * refine
}

/// Size of the supervised subset: `min(⌈fraction·n⌉, cap)`.
pub fn sample_count(n: usize, cfg: &LossConfig) -> usize {
    ((cfg.sample_fraction * n as f64).ceil() as usize).min(cfg.sample_cap).min(n)
}

/// Sorted indices of the supervised subset, deterministic under `seed`.
pub fn sample_supervision(n: usize, cfg: &LossConfig, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, sample_count(n, cfg)).into_vec();
    idx.sort_unstable();
    idx
}

/// Central finite difference of `f` along input element `index`.
pub fn finite_difference(f: impl Fn(&[f32]) -> f64, x: &[f32], index: usize, eps: f32) -> f64 {
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    plus[index] += eps;
    minus[index] -= eps;
    (f(&plus) - f(&minus)) / (plus[index] as f64 - minus[index] as f64)
}

/// Per-pair loss summary as written to `loss.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cov: f64,
    #[serde(rename = "match")]
    pub matching: f64,
    pub refine: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(cov: f64, matching: f64, refine: f64, cfg: &LossConfig) -> Self {
        Self { cov, matching, refine, total: total_loss(cov, matching, refine, cfg) }
    }
}
