//! Co-visible feature interaction over coarse descriptor grids.
//!
//! Order of operations per pair:
//! 1. one self + cross attention set (encoder),
//! 2. decode a co-visible query per image from a shared learned query,
//! 3. cross attention guided by the other image's decoded query,
//! 4. a final self + cross attention set.
//!
//! Cross attention updates both images from the same inputs, so swapping the
//! images swaps the outputs exactly.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::features::FeatureGrid;
use crate::numerics::{self, elu_plus_one, layer_norm, matmul, matmul_bt, relu, Tensor};

/// Channel width of the coarse features.
pub const COARSE_DIM: usize = 256;
pub const DEFAULT_HEADS: usize = 8;
/// Scale applied to residual-branch output projections at seeded init, so an
/// untrained network stays close to the identity map.
pub const RESIDUAL_GAIN: f32 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Softmax,
    Linear,
}

impl AttentionKind {
    pub fn code(self) -> f32 {
        match self {
            Self::Softmax => 0.0,
            Self::Linear => 1.0,
        }
    }

    pub fn from_code(v: f32) -> Result<Self> {
        match v {
            0.0 => Ok(Self::Softmax),
            1.0 => Ok(Self::Linear),
            c => Err(Error::Format(format!("unknown attention kind code {c}"))),
        }
    }
}

/// Single-head attention of `q (n×d)` over `k (m×d)`, `v (m×dv)`.
///
/// Softmax attention uses `softmax(q kᵀ / √d) v`. Linear attention uses the
/// `elu + 1` feature map with associativity-reordered normalisation.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, kind: AttentionKind) -> Result<Tensor> {
    let (Some(&dq), Some(&dk)) = (q.shape().last(), k.shape().last()) else {
        return Err(shape("attention inputs must be rank 2"));
    };
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(shape("attention inputs must be rank 2"));
    }
    if dq != dk {
        return Err(shape(format!("query width {dq} vs key width {dk}")));
    }
    if k.shape()[0] != v.shape()[0] {
        return Err(shape(format!("{} keys vs {} values", k.shape()[0], v.shape()[0])));
    }
    if k.shape()[0] == 0 {
        return Err(shape("attention needs at least one key"));
    }
    match kind {
        AttentionKind::Softmax => {
            let scores = matmul_bt(q, k)?.scale(1.0 / (dq as f32).sqrt());
            let probs = numerics::softmax(&scores, 1)?;
            matmul(&probs, v)
        }
        AttentionKind::Linear => {
            let fq = q.map(elu_plus_one);
            let fk = k.map(elu_plus_one);
            let (m, dv) = (v.shape()[0], v.shape()[1]);
            let mut kv = vec![0.0f64; dq * dv];
            let mut ksum = vec![0.0f64; dq];
            for j in 0..m {
                let (kr, vr) = (fk.row(j), v.row(j));
                for (a, &kval) in kr.iter().enumerate() {
                    ksum[a] += kval as f64;
                    for (b, &vval) in vr.iter().enumerate() {
                        kv[a * dv + b] += kval as f64 * vval as f64;
                    }
                }
            }
            let n = q.shape()[0];
            let mut out = vec![0.0f32; n * dv];
            for i in 0..n {
                let qr = fq.row(i);
                let denom: f64 = qr.iter().zip(&ksum).map(|(&a, &b)| a as f64 * b).sum();
                for b in 0..dv {
                    let num: f64 = qr.iter().enumerate().map(|(a, &qa)| qa as f64 * kv[a * dv + b]).sum();
                    out[i * dv + b] = (num / denom) as f32;
                }
            }
            Tensor::new(vec![n, dv], out)
        }
    }
}

fn split_heads(t: &Tensor, heads: usize, h: usize) -> Tensor {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    let hd = d / heads;
    let mut out = Vec::with_capacity(n * hd);
    for i in 0..n {
        out.extend_from_slice(&t.row(i)[h * hd..(h + 1) * hd]);
    }
    Tensor::new(vec![n, hd], out).expect("consistent")
}

/// Multi-head attention: heads are contiguous channel blocks.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, kind: AttentionKind) -> Result<Tensor> {
    let d = q.row_len();
    if heads == 0 || !d.is_multiple_of(heads) || !v.row_len().is_multiple_of(heads) {
        return Err(invalid(format!("{heads} heads do not divide width {d}")));
    }
    let n = q.shape()[0];
    let dv = v.row_len();
    let hv = dv / heads;
    let mut out = Tensor::zeros(&[n, dv]);
    for h in 0..heads {
        let o = attention(&split_heads(q, heads, h), &split_heads(k, heads, h), &split_heads(v, heads, h), kind)?;
        for i in 0..n {
            out.row_mut(i)[h * hv..(h + 1) * hv].copy_from_slice(o.row(i));
        }
    }
    Ok(out)
}

/// Pre-norm transformer block: attention message plus feed-forward, both residual.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ff1: Tensor,
    pub ff2: Tensor,
    pub norm1_gamma: Vec<f32>,
    pub norm1_beta: Vec<f32>,
    pub norm2_gamma: Vec<f32>,
    pub norm2_beta: Vec<f32>,
}

impl AttentionLayer {
    pub fn zeros(d: usize) -> Self {
        Self {
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            ff1: Tensor::zeros(&[d, 2 * d]),
            ff2: Tensor::zeros(&[2 * d, d]),
            norm1_gamma: vec![1.0; d],
            norm1_beta: vec![0.0; d],
            norm2_gamma: vec![1.0; d],
            norm2_beta: vec![0.0; d],
        }
    }

    pub fn seeded(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut mat = |rows: usize, cols: usize, gain: f32| {
            let normal = Normal::new(0.0f64, 1.0 / (rows as f64).sqrt()).expect("positive sd");
            Tensor::from_fn(&[rows, cols], |_| normal.sample(rng) as f32 * gain)
        };
        Self {
            wq: mat(d, d, 1.0),
            wk: mat(d, d, 1.0),
            wv: mat(d, d, 1.0),
            wo: mat(d, d, RESIDUAL_GAIN),
            ff1: mat(d, 2 * d, 1.0),
            ff2: mat(2 * d, d, RESIDUAL_GAIN),
            norm1_gamma: vec![1.0; d],
            norm1_beta: vec![0.0; d],
            norm2_gamma: vec![1.0; d],
            norm2_beta: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }

    /// Updates `x` with messages gathered from `source` (`source == x` for self attention).
    pub fn forward(&self, x: &Tensor, source: &Tensor, heads: usize, kind: AttentionKind) -> Result<Tensor> {
        let d = self.dim();
        if x.row_len() != d || source.row_len() != d {
            return Err(shape(format!(
                "layer width {d} vs inputs {} / {}",
                x.row_len(),
                source.row_len()
            )));
        }
        let xn = layer_norm(x, &self.norm1_gamma, &self.norm1_beta)?;
        let sn = layer_norm(source, &self.norm1_gamma, &self.norm1_beta)?;
        let q = matmul(&xn, &self.wq)?;
        let k = matmul(&sn, &self.wk)?;
        let v = matmul(&sn, &self.wv)?;
        let msg = matmul(&multi_head_attention(&q, &k, &v, heads, kind)?, &self.wo)?;
        let x = x.add(&msg)?;
        let hidden = matmul(&layer_norm(&x, &self.norm2_gamma, &self.norm2_beta)?, &self.ff1)?.map(relu);
        x.add(&matmul(&hidden, &self.ff2)?)
    }

    pub fn export(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        let d = self.dim();
        let vec_t = |v: &Vec<f32>| Tensor::new(vec![d], v.clone()).expect("width d");
        out.push((format!("{prefix}.wq"), self.wq.clone()));
        out.push((format!("{prefix}.wk"), self.wk.clone()));
        out.push((format!("{prefix}.wv"), self.wv.clone()));
        out.push((format!("{prefix}.wo"), self.wo.clone()));
        out.push((format!("{prefix}.ff1"), self.ff1.clone()));
        out.push((format!("{prefix}.ff2"), self.ff2.clone()));
        out.push((format!("{prefix}.norm1.gamma"), vec_t(&self.norm1_gamma)));
        out.push((format!("{prefix}.norm1.beta"), vec_t(&self.norm1_beta)));
        out.push((format!("{prefix}.norm2.gamma"), vec_t(&self.norm2_gamma)));
        out.push((format!("{prefix}.norm2.beta"), vec_t(&self.norm2_beta)));
    }

    pub fn import(prefix: &str, d: usize, params: &mut BTreeMap<String, Tensor>) -> Result<Self> {
        let mut take = |name: &str, shape_: &[usize]| take_param(params, &format!("{prefix}.{name}"), shape_);
        Ok(Self {
            wq: take("wq", &[d, d])?,
            wk: take("wk", &[d, d])?,
            wv: take("wv", &[d, d])?,
            wo: take("wo", &[d, d])?,
            ff1: take("ff1", &[d, 2 * d])?,
            ff2: take("ff2", &[2 * d, d])?,
            norm1_gamma: take("norm1.gamma", &[d])?.into_data(),
            norm1_beta: take("norm1.beta", &[d])?.into_data(),
            norm2_gamma: take("norm2.gamma", &[d])?.into_data(),
            norm2_beta: take("norm2.beta", &[d])?.into_data(),
        })
    }
}

pub(crate) fn take_param(params: &mut BTreeMap<String, Tensor>, name: &str, expected: &[usize]) -> Result<Tensor> {
    let t = params
        .remove(name)
        .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
    if t.shape() != expected {
        return Err(Error::Format(format!(
            "parameter {name} has shape {:?}, expected {expected:?}",
            t.shape()
        )));
    }
    Ok(t)
}

/// Parameters of the co-visible feature interaction stack.
#[derive(Debug, Clone, PartialEq)]
pub struct CfiWeights {
    pub dim: usize,
    pub heads: usize,
    pub kind: AttentionKind,
    pub encoder_self: AttentionLayer,
    pub encoder_cross: AttentionLayer,
    pub query_decode: AttentionLayer,
    pub guided_cross: AttentionLayer,
    pub final_self: AttentionLayer,
    pub final_cross: AttentionLayer,
    /// Learned co-visible query, `d` entries.
    pub covis_query: Vec<f32>,
}

const LAYER_NAMES: [&str; 6] = [
    "cfi.encoder_self",
    "cfi.encoder_cross",
    "cfi.query_decode",
    "cfi.guided_cross",
    "cfi.final_self",
    "cfi.final_cross",
];

impl CfiWeights {
    /// All projections zero: every block reduces to its residual path.
    pub fn identity(dim: usize, kind: AttentionKind) -> Self {
        Self {
            dim,
            heads: DEFAULT_HEADS,
            kind,
            encoder_self: AttentionLayer::zeros(dim),
            encoder_cross: AttentionLayer::zeros(dim),
            query_decode: AttentionLayer::zeros(dim),
            guided_cross: AttentionLayer::zeros(dim),
            final_self: AttentionLayer::zeros(dim),
            final_cross: AttentionLayer::zeros(dim),
            covis_query: vec![0.0; dim],
        }
    }

    pub fn seeded(seed: u64, kind: AttentionKind) -> Self {
        let d = COARSE_DIM;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(10);
        let encoder_self = AttentionLayer::seeded(d, &mut rng);
        let encoder_cross = AttentionLayer::seeded(d, &mut rng);
        let query_decode = AttentionLayer::seeded(d, &mut rng);
        let guided_cross = AttentionLayer::seeded(d, &mut rng);
        let final_self = AttentionLayer::seeded(d, &mut rng);
        let final_cross = AttentionLayer::seeded(d, &mut rng);
        let normal = Normal::new(0.0f64, 1.0 / (d as f64).sqrt()).expect("positive sd");
        let covis_query = (0..d).map(|_| normal.sample(&mut rng) as f32).collect();
        Self {
            dim: d,
            heads: DEFAULT_HEADS,
            kind,
            encoder_self,
            encoder_cross,
            query_decode,
            guided_cross,
            final_self,
            final_cross,
            covis_query,
        }
    }

    fn layers(&self) -> [&AttentionLayer; 6] {
        [
            &self.encoder_self,
            &self.encoder_cross,
            &self.query_decode,
            &self.guided_cross,
            &self.final_self,
            &self.final_cross,
        ]
    }

    pub fn export(&self, out: &mut Vec<(String, Tensor)>) {
        out.push(("cfi.meta.kind".into(), Tensor::new(vec![1], vec![self.kind.code()]).expect("1")));
        out.push(("cfi.meta.heads".into(), Tensor::new(vec![1], vec![self.heads as f32]).expect("1")));
        for (name, layer) in LAYER_NAMES.iter().zip(self.layers()) {
            layer.export(name, out);
        }
        out.push((
            "cfi.covis_query".into(),
            Tensor::new(vec![1, self.dim], self.covis_query.clone()).expect("1×d"),
        ));
    }

    pub fn import(params: &mut BTreeMap<String, Tensor>) -> Result<Self> {
        let kind = AttentionKind::from_code(take_param(params, "cfi.meta.kind", &[1])?.data()[0])?;
        let heads = take_param(params, "cfi.meta.heads", &[1])?.data()[0] as usize;
        let query = params
            .get("cfi.covis_query")
            .ok_or_else(|| Error::Format("missing parameter cfi.covis_query".into()))?;
        let dim = query.row_len();
        let covis_query = take_param(params, "cfi.covis_query", &[1, dim])?.into_data();
        let mut layer = |i: usize| AttentionLayer::import(LAYER_NAMES[i], dim, params);
        Ok(Self {
            dim,
            heads,
            kind,
            encoder_self: layer(0)?,
            encoder_cross: layer(1)?,
            query_decode: layer(2)?,
            guided_cross: layer(3)?,
            final_self: layer(4)?,
            final_cross: layer(5)?,
            covis_query,
        })
    }
}

/// Interaction outputs for both images.
#[derive(Debug, Clone, PartialEq)]
pub struct CfiOutput {
    pub feat_a3: FeatureGrid,
    pub feat_b3: FeatureGrid,
    pub feat_a2: FeatureGrid,
    pub feat_b2: FeatureGrid,
    pub query_a: Vec<f32>,
    pub query_b: Vec<f32>,
}

fn self_cross(
    a: &Tensor,
    b: &Tensor,
    self_layer: &AttentionLayer,
    cross_layer: &AttentionLayer,
    heads: usize,
    kind: AttentionKind,
) -> Result<(Tensor, Tensor)> {
    let a = self_layer.forward(a, a, heads, kind)?;
    let b = self_layer.forward(b, b, heads, kind)?;
    let a_next = cross_layer.forward(&a, &b, heads, kind)?;
    let b_next = cross_layer.forward(&b, &a, heads, kind)?;
    Ok((a_next, b_next))
}

pub fn cfi_forward(feat_a: &FeatureGrid, feat_b: &FeatureGrid, w: &CfiWeights) -> Result<CfiOutput> {
    if feat_a.channels() != w.dim || feat_b.channels() != w.dim {
        return Err(shape(format!(
            "CFI expects {} channels, got {} / {}",
            w.dim,
            feat_a.channels(),
            feat_b.channels()
        )));
    }
    let (heads, kind) = (w.heads, w.kind);
    let a0 = feat_a.as_matrix();
    let b0 = feat_b.as_matrix();

    let (a1, b1) = self_cross(&a0, &b0, &w.encoder_self, &w.encoder_cross, heads, kind)?;

    let q = Tensor::new(vec![1, w.dim], w.covis_query.clone())?;
    let query_a = w.query_decode.forward(&q, &a1, heads, kind)?.into_data();
    let query_b = w.query_decode.forward(&q, &b1, heads, kind)?.into_data();

    let a2 = w.guided_cross.forward(&a1, &b1.add_row_broadcast(&query_b)?, heads, kind)?;
    let b2 = w.guided_cross.forward(&b1, &a1.add_row_broadcast(&query_a)?, heads, kind)?;

    let (a3, b3) = self_cross(&a2, &b2, &w.final_self, &w.final_cross, heads, kind)?;

    let grid = |m: Tensor, like: &FeatureGrid| FeatureGrid::from_matrix(m, like.height(), like.width(), like.stride());
    Ok(CfiOutput {
        feat_a3: grid(a3, feat_a)?,
        feat_b3: grid(b3, feat_b)?,
        feat_a2: grid(a2, feat_a)?,
        feat_b2: grid(b2, feat_b)?,
        query_a,
        query_b,
    })
}
