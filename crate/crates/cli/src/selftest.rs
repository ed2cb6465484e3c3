//! Invariant checks on built-in fixtures.

use geomatch::assignment::{estimate_scale, filter_covisible, Match, MatchSet};
use geomatch::cfi::{cfi_forward, AttentionKind};
use geomatch::container;
use geomatch::covisible::CoVisibleMap;
use geomatch::geometry::Homography;
use geomatch::labels::generate_labels;
use geomatch::losses::{focal_loss, total_loss, LossConfig};
use geomatch::metrics::{corner_accuracy, mma, pose_auc, CORNER_THRESHOLDS, MMA_THRESHOLDS};
use geomatch::model::ModelWeights;
use geomatch::pipeline::{MatchConfig, Matcher, PairInput};
use geomatch::synthscene::{make_planar_pair, PlanarParams, SceneConfig};
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: impl Into<String>) -> Check {
    Check { name, passed, detail: detail.into() }
}

fn zoom_labels(s: f64) -> geomatch::labels::GroundTruthLabels {
    let pair = make_planar_pair(1, &PlanarParams { scale_ratio: s, ..Default::default() }, &SceneConfig::default())
        .expect("fixture pair");
    generate_labels(&pair.geometry, 8).expect("fixture labels")
}

fn identity_labels() -> Check {
    let l = zoom_labels(1.0);
    let diagonal = l.positives.len() == 64 && l.positives.iter().all(|&(i, j)| i == j);
    check("labels_identity", diagonal, format!("{} positives", l.positives.len()))
}

fn zoom_scale() -> Check {
    let l = zoom_labels(2.0);
    let est = estimate_scale(&l.one_way(0), &l.one_way(1));
    check("scale_double_zoom", est.s0 == 4.0 && est.index == 0, format!("s0 = {}, s1 = {}", est.s0, est.s1))
}

fn loss_closed_forms() -> Check {
    let cfg = LossConfig::default();
    let f = focal_loss(&[0.5], &[true], &cfg).unwrap_or(f64::NAN);
    let t = total_loss(2.0, 1.0, 1.0, &cfg);
    check("loss_closed_forms", (f - 0.043321).abs() < 1e-6 && t == 3.0, format!("focal {f:.6}, total {t}"))
}

fn metric_fixtures() -> Check {
    let id = Homography::identity();
    let shift = Homography::new(Matrix3::new(1.0, 0.0, 4.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)).expect("invertible");
    let corners = corner_accuracy(Some(&shift), &id, 64.0, 64.0, &CORNER_THRESHOLDS) == [false, false, true];
    let rates = mma(&[0.5, 0.5, 2.5, 2.5], &MMA_THRESHOLDS).rates == [0.5, 0.5, 1.0];
    let auc = pose_auc(&[5.0], &[10.0]).map(|v| v == [0.5]).unwrap_or(false);
    check("metric_fixtures", corners && rates && auc, format!("corners {corners}, mma {rates}, auc {auc}"))
}

fn filter_subset() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ok = true;
    for _ in 0..200 {
        let n = rng.gen_range(0..40);
        let m = MatchSet::new(
            (0..n).map(|_| Match { i: rng.gen_range(0..16), j: rng.gen_range(0..16), confidence: rng.gen() }).collect(),
            Some(0),
        );
        let cov = CoVisibleMap::from_masks((0..16).map(|_| rng.gen()).collect(), (0..16).map(|_| rng.gen()).collect());
        let kept = filter_covisible(&m, &cov).expect("indices in range");
        let mut it = m.matches.iter();
        ok &= kept.matches.iter().all(|k| it.any(|x| x == k));
        ok &= kept.matches.iter().all(|k| cov.mask_a[k.i] && cov.mask_b[k.j]);
    }
    check("filter_subset", ok, "200 random fixtures")
}

fn cfi_swap() -> Check {
    let pair = make_planar_pair(2, &PlanarParams { rotation_deg: 10.0, ..Default::default() }, &SceneConfig::default())
        .expect("fixture pair");
    let w = ModelWeights::seeded(0, AttentionKind::Linear).cfi;
    let ab = cfi_forward(&pair.coarse_a, &pair.coarse_b, &w).expect("forward");
    let ba = cfi_forward(&pair.coarse_b, &pair.coarse_a, &w).expect("forward");
    let swapped = ab.feat_a3 == ba.feat_b3 && ab.feat_b3 == ba.feat_a3 && ab.query_a == ba.query_b;
    check("cfi_swap_symmetry", swapped, "bit-exact")
}

fn container_roundtrip() -> Check {
    let entries = ModelWeights::seeded(1, AttentionKind::Softmax).export();
    let bytes = container::to_bytes(&entries);
    let back = container::read_tensors(bytes.as_slice()).map(|b| b == entries).unwrap_or(false);
    check("container_roundtrip", back, format!("{} tensors, {} bytes", entries.len(), bytes.len()))
}

fn identity_pipeline() -> Check {
    let pair = make_planar_pair(3, &PlanarParams::default(), &SceneConfig::default()).expect("fixture pair");
    let matcher = Matcher::new(ModelWeights::seeded(0, AttentionKind::Linear), MatchConfig::default()).expect("config");
    let input = PairInput {
        coarse_a: &pair.coarse_a,
        coarse_b: &pair.coarse_b,
        fine_a: &pair.fine_a,
        fine_b: &pair.fine_b,
        labels: None,
        geometry: None,
        seed: 3,
    };
    let run = || matcher.match_pair(&input).expect("pipeline");
    let (first, second) = (run(), run());
    let own = first.filtered.matches.iter().filter(|m| m.i == m.j).count();
    let refined = first.refined.as_ref().map_or(0, |r| {
        r.matches.iter().filter(|m| (m.pb - m.pa).norm() < 0.25).count()
    });
    let deterministic = first.filtered == second.filtered
        && first.refined.as_ref().map(|r| &r.matches) == second.refined.as_ref().map(|r| &r.matches);
    let total = first.refined.as_ref().map_or(0, |r| r.matches.len());
    check(
        "pipeline_identity",
        own * 10 >= 64 * 9 && deterministic && refined * 20 >= total * 19,
        format!("{own}/64 self-matches, {refined}/{total} refined within 0.25 px, deterministic {deterministic}"),
    )
}

pub fn run_checks() -> Vec<Check> {
    vec![
        identity_labels(),
        zoom_scale(),
        loss_closed_forms(),
        metric_fixtures(),
        filter_subset(),
        cfi_swap(),
        container_roundtrip(),
        identity_pipeline(),
    ]
}

/// One line per check: `PASS|FAIL <name>: <detail>`.
pub fn format_checks(checks: &[Check]) -> String {
    checks
        .iter()
        .map(|c| format!("{} {}: {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let checks = run_checks();
        let report = format_checks(&checks);
        assert!(checks.iter().all(|c| c.passed), "{report}");
        assert_eq!(report.lines().count(), checks.len());
    }
}
