//! Co-visible area segmentation over the coarse grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cfi::take_param;
use crate::error::{invalid, shape, Result};
use crate::features::FeatureGrid;
use crate::numerics::{conv2d, dot, relu, sigmoid, Tensor};

pub const DEFAULT_COVISIBLE_THRESHOLD: f64 = 0.2;
/// Output bias of a freshly seeded head: untrained maps lean towards "visible".
pub const SEEDED_OUTPUT_BIAS: f32 = 2.0;

/// Two 3×3 convolutions, `d → d/2 → 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovisibleHeadWeights {
    pub conv1: Tensor,
    pub bias1: Vec<f32>,
    pub conv2: Tensor,
    pub bias2: Vec<f32>,
}

impl CovisibleHeadWeights {
    pub fn zeros(d: usize) -> Self {
        Self {
            conv1: Tensor::zeros(&[3, 3, d, d / 2]),
            bias1: vec![0.0; d / 2],
            conv2: Tensor::zeros(&[3, 3, d / 2, 1]),
            bias2: vec![0.0],
        }
    }

    pub fn seeded(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(11);
        let mut conv = |cin: usize, cout: usize, gain: f64| {
            let normal = Normal::new(0.0, gain / ((9 * cin) as f64).sqrt()).expect("positive sd");
            Tensor::from_fn(&[3, 3, cin, cout], |_| normal.sample(&mut rng) as f32)
        };
        let conv1 = conv(d, d / 2, 1.0);
        let conv2 = conv(d / 2, 1, 0.1);
        Self { conv1, bias1: vec![0.0; d / 2], conv2, bias2: vec![SEEDED_OUTPUT_BIAS] }
    }

    pub fn dim(&self) -> usize {
        self.conv1.shape()[2]
    }

    pub fn export(&self, out: &mut Vec<(String, Tensor)>) {
        let hidden = self.bias1.len();
        out.push(("covisible.conv1.weight".into(), self.conv1.clone()));
        out.push(("covisible.conv1.bias".into(), Tensor::new(vec![hidden], self.bias1.clone()).expect("len")));
        out.push(("covisible.conv2.weight".into(), self.conv2.clone()));
        out.push(("covisible.conv2.bias".into(), Tensor::new(vec![1], self.bias2.clone()).expect("len")));
    }

    pub fn import(d: usize, params: &mut BTreeMap<String, Tensor>) -> Result<Self> {
        let h = d / 2;
        Ok(Self {
            conv1: take_param(params, "covisible.conv1.weight", &[3, 3, d, h])?,
            bias1: take_param(params, "covisible.conv1.bias", &[h])?.into_data(),
            conv2: take_param(params, "covisible.conv2.weight", &[3, 3, h, 1])?,
            bias2: take_param(params, "covisible.conv2.bias", &[1])?.into_data(),
        })
    }
}

/// Co-visibility probability map of one image, `h×w` in `(0, 1)`.
///
/// Each patch feature is gated by `sigmoid(F·Q)`, added back to itself, and
/// fed through conv → ReLU → conv → sigmoid.
pub fn covisible_head(feat: &FeatureGrid, query: &[f32], w: &CovisibleHeadWeights) -> Result<Tensor> {
    let d = feat.channels();
    if query.len() != d || w.dim() != d {
        return Err(shape(format!(
            "co-visible head width {} and query {} vs features {d}",
            w.dim(),
            query.len()
        )));
    }
    let mut enhanced = feat.tensor().clone();
    for i in 0..feat.len() {
        let row = enhanced.row_mut(i);
        let gate = sigmoid(dot(row, query)) as f32;
        row.iter_mut().for_each(|v| *v += gate * *v);
    }
    let hidden = conv2d(&enhanced, &w.conv1, Some(&w.bias1))?.map(relu);
    let logits = conv2d(&hidden, &w.conv2, Some(&w.bias2))?;
    let (h, wd) = (feat.height(), feat.width());
    logits.map(|v| sigmoid(v as f64) as f32).reshape(&[h, wd])
}

/// `prob ≥ θ` elementwise.
pub fn threshold_mask(prob: &Tensor, theta: f64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(invalid(format!("co-visible threshold {theta} outside [0, 1]")));
    }
    if let Some(p) = prob.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(invalid(format!("probability {p} outside [0, 1]")));
    }
    Ok(prob.data().iter().map(|&p| p as f64 >= theta).collect())
}

/// Probability maps and thresholded masks for both images of a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CoVisibleMap {
    pub prob_a: Tensor,
    pub prob_b: Tensor,
    pub threshold: f64,
    pub mask_a: Vec<bool>,
    pub mask_b: Vec<bool>,
}

impl CoVisibleMap {
    pub fn new(prob_a: Tensor, prob_b: Tensor, threshold: f64) -> Result<Self> {
        let mask_a = threshold_mask(&prob_a, threshold)?;
        let mask_b = threshold_mask(&prob_b, threshold)?;
        Ok(Self { prob_a, prob_b, threshold, mask_a, mask_b })
    }

    /// Hard masks (e.g. ground truth); probabilities become 0/1.
    pub fn from_masks(mask_a: Vec<bool>, mask_b: Vec<bool>) -> Self {
        let as_prob = |m: &[bool]| {
            Tensor::new(vec![m.len()], m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).expect("1-d")
        };
        Self { prob_a: as_prob(&mask_a), prob_b: as_prob(&mask_b), threshold: 0.5, mask_a, mask_b }
    }

    /// Everything visible; filtering becomes a no-op.
    pub fn all_visible(len_a: usize, len_b: usize) -> Self {
        Self::from_masks(vec![true; len_a], vec![true; len_b])
    }
}

/// Binary PGM (`P5`, 8-bit) with 255 for true cells.
pub fn mask_to_pgm(mask: &[bool], width: usize, height: usize) -> Result<Vec<u8>> {
    if mask.len() != width * height {
        return Err(shape(format!("mask of {} cells is not {width}×{height}", mask.len())));
    }
    let mut header = String::new();
    write!(header, "P5\n{width} {height}\n255\n").expect("string write");
    let mut out = header.into_bytes();
    out.extend(mask.iter().map(|&b| if b { 255u8 } else { 0 }));
    Ok(out)
}
