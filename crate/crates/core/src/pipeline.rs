//! End-to-end matching of one pair: interaction, co-visibility, adaptive
//! assignment, filtering and refinement, plus optional forward losses.

use serde::{Deserialize, Serialize};

use crate::assignment::{
    dual_softmax_proposals, estimate_scale, filter_covisible, similarity, MatchSet, ScaleEstimate, Selection,
    DEFAULT_MATCH_THRESHOLD, DEFAULT_TEMPERATURE,
};
use crate::cfi::cfi_forward;
use crate::covisible::{covisible_head, CoVisibleMap, DEFAULT_COVISIBLE_THRESHOLD};
use crate::error::{invalid, Result};
use crate::features::FeatureGrid;
use crate::labels::{targets_for_refined, GroundTruthLabels};
use crate::losses::{focal_loss, refine_loss, sample_supervision, LossConfig, LossReport};
use crate::model::ModelWeights;
use crate::refine::{refine_matches, RefineConfig, RefineOutput};
use crate::synthscene::PairGeometry;

/// Where the co-visibility masks used for filtering come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovisibleSource {
    #[default]
    Predicted,
    GroundTruth,
    Off,
}

/// Which probability matrices supervise the matching loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchSupervision {
    /// Only the direction selected by scale estimation.
    #[default]
    Selected,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub match_threshold: f64,
    pub covisible_threshold: f64,
    /// Similarity temperature `r`.
    pub temperature: f64,
    pub selection: Selection,
    pub covisible: CovisibleSource,
    pub refine: bool,
    pub refine_config: RefineConfig,
    pub loss: LossConfig,
    pub match_supervision: MatchSupervision,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            covisible_threshold: DEFAULT_COVISIBLE_THRESHOLD,
            temperature: DEFAULT_TEMPERATURE,
            selection: Selection::Argmax,
            covisible: CovisibleSource::Predicted,
            refine: true,
            refine_config: RefineConfig::default(),
            loss: LossConfig::default(),
            match_supervision: MatchSupervision::Selected,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        // above 1 nothing can pass, which is still a legal request
        if !(self.match_threshold >= 0.0) || !self.match_threshold.is_finite() {
            return Err(invalid(format!("match threshold {} must be finite and ≥ 0", self.match_threshold)));
        }
        if !(0.0..=1.0).contains(&self.covisible_threshold) {
            return Err(invalid(format!("co-visible threshold {} outside [0, 1]", self.covisible_threshold)));
        }
        if !(self.temperature > 0.0) {
            return Err(invalid(format!("similarity temperature must be positive, got {}", self.temperature)));
        }
        self.refine_config.validate()?;
        self.loss.validate()
    }
}

/// Inputs of one pair.
pub struct PairInput<'a> {
    pub coarse_a: &'a FeatureGrid,
    pub coarse_b: &'a FeatureGrid,
    pub fine_a: &'a FeatureGrid,
    pub fine_b: &'a FeatureGrid,
    /// Needed for ground-truth masks and losses.
    pub labels: Option<&'a GroundTruthLabels>,
    pub geometry: Option<&'a PairGeometry>,
    /// Seeds supervision sampling.
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct PairOutput {
    pub scale: ScaleEstimate,
    pub covisible: CoVisibleMap,
    /// One-way proposals of the selected direction before filtering.
    pub proposals: MatchSet,
    /// Proposals surviving the co-visibility filter.
    pub filtered: MatchSet,
    pub refined: Option<RefineOutput>,
    pub losses: Option<LossReport>,
}

pub struct Matcher {
    pub weights: ModelWeights,
    pub config: MatchConfig,
}

/// Scales each feature by `1/√d` so the similarity is `⟨a, b⟩ / (d·r)`.
fn scaled(grid: &FeatureGrid) -> Result<FeatureGrid> {
    let k = 1.0 / (grid.channels() as f32).sqrt();
    grid.with_tensor(grid.tensor().scale(k))
}

impl Matcher {
    pub fn new(weights: ModelWeights, config: MatchConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { weights, config })
    }

    pub fn match_pair(&self, input: &PairInput) -> Result<PairOutput> {
        let cfg = &self.config;
        let out = cfi_forward(input.coarse_a, input.coarse_b, &self.weights.cfi)?;

        let predicted = || -> Result<CoVisibleMap> {
            let pa = covisible_head(&out.feat_a2, &out.query_a, &self.weights.covisible)?;
            let pb = covisible_head(&out.feat_b2, &out.query_b, &self.weights.covisible)?;
            CoVisibleMap::new(pa, pb, cfg.covisible_threshold)
        };
        let (na, nb) = (input.coarse_a.len(), input.coarse_b.len());
        let predicted_map = match (cfg.covisible, input.labels) {
            (CovisibleSource::Off, None) => None,
            _ => Some(predicted()?),
        };
        let covisible = match cfg.covisible {
            CovisibleSource::Predicted => predicted_map.clone().expect("computed above"),
            CovisibleSource::GroundTruth => {
                let labels = input.labels.ok_or_else(|| invalid("ground-truth co-visibility needs labels"))?;
                CoVisibleMap::from_masks(labels.cov_a.clone(), labels.cov_b.clone())
            }
            CovisibleSource::Off => CoVisibleMap::all_visible(na, nb),
        };

        let sim = similarity(&scaled(&out.feat_a3)?, &scaled(&out.feat_b3)?, cfg.temperature)?;
        let dual = dual_softmax_proposals(&sim, cfg.match_threshold, cfg.selection)?;
        let scale = estimate_scale(&dual.m0, &dual.m1);
        let proposals = dual.matches(scale.index).clone();
        let filtered = filter_covisible(&proposals, &covisible)?;

        let refined = if cfg.refine {
            Some(refine_matches(
                &filtered,
                input.fine_a,
                input.fine_b,
                &scale,
                &self.weights.refine,
                &cfg.refine_config,
            )?)
        } else {
            None
        };

        let losses = match (input.labels, input.geometry, predicted_map.as_ref()) {
            (Some(labels), Some(geometry), Some(pred)) => {
                let cov = focal_loss(pred.prob_a.data(), &labels.cov_a, &cfg.loss)?
                    + focal_loss(pred.prob_b.data(), &labels.cov_b, &cfg.loss)?;
                let dense = labels.dense();
                let matching = match cfg.match_supervision {
                    MatchSupervision::Selected => focal_loss(dual.probs(scale.index).data(), &dense, &cfg.loss)?,
                    MatchSupervision::Both => {
                        focal_loss(dual.p0.data(), &dense, &cfg.loss)? + focal_loss(dual.p1.data(), &dense, &cfg.loss)?
                    }
                };
                let refine = match &refined {
                    Some(r) => {
                        let picked: Vec<_> = sample_supervision(r.matches.len(), &cfg.loss, input.seed)
                            .into_iter()
                            .map(|k| r.matches[k])
                            .collect();
                        let targets: Vec<_> =
                            targets_for_refined(&picked, geometry).into_iter().map(|t| t.target).collect();
                        refine_loss(&picked, &targets)?.value
                    }
                    None => 0.0,
                };
                Some(LossReport::new(cov, matching, refine, &cfg.loss))
            }
            _ => None,
        };

        Ok(PairOutput { scale, covisible, proposals, filtered, refined, losses })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfi::AttentionKind;
    use crate::labels::generate_labels;
    use crate::synthscene::{make_planar_pair, PlanarParams, SceneConfig};

    fn run(params: PlanarParams, cfg: MatchConfig) -> (PairOutput, GroundTruthLabels) {
        let pair = make_planar_pair(4, &params, &SceneConfig::default()).unwrap();
        let labels = generate_labels(&pair.geometry, 8).unwrap();
        let matcher = Matcher::new(ModelWeights::seeded(0, AttentionKind::Linear), cfg).unwrap();
        let out = matcher
            .match_pair(&PairInput {
                coarse_a: &pair.coarse_a,
                coarse_b: &pair.coarse_b,
                fine_a: &pair.fine_a,
                fine_b: &pair.fine_b,
                labels: Some(&labels),
                geometry: Some(&pair.geometry),
                seed: 4,
            })
            .unwrap();
        (out, labels)
    }

    #[test]
    fn identity_pair_matches_itself() {
        let (out, _) = run(PlanarParams::default(), MatchConfig::default());
        let own = out.filtered.matches.iter().filter(|m| m.i == m.j).count();
        assert!(own as f64 >= 0.9 * 64.0, "{own} self-matches");
        assert_eq!((out.scale.s0, out.scale.s1), (1.0, 1.0));
        let losses = out.losses.unwrap();
        assert!(losses.total.is_finite() && losses.total >= 0.0);
    }

    #[test]
    fn ground_truth_masks_filter_outside_matches() {
        let params = PlanarParams { translation: [24.0, 0.0], ..Default::default() };
        let cfg = MatchConfig { covisible: CovisibleSource::GroundTruth, ..Default::default() };
        let (out, labels) = run(params, cfg);
        assert!(out.filtered.len() <= out.proposals.len());
        for m in &out.filtered.matches {
            assert!(labels.cov_a[m.i] && labels.cov_b[m.j]);
        }
    }

    #[test]
    fn refinement_can_be_disabled() {
        let (out, _) = run(PlanarParams::default(), MatchConfig { refine: false, ..Default::default() });
        assert!(out.refined.is_none());
        assert_eq!(out.losses.unwrap().refine, 0.0);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = MatchConfig { temperature: 0.0, ..Default::default() };
        assert!(Matcher::new(ModelWeights::seeded(0, AttentionKind::Linear), cfg).is_err());
        let cfg = MatchConfig { covisible_threshold: 1.5, ..Default::default() };
        assert!(Matcher::new(ModelWeights::seeded(0, AttentionKind::Linear), cfg).is_err());
    }
}
