//! Dense array kernels shared by every stage of the matcher.
//!
//! Storage is row-major `f32`; every reduction (dot products, matmul, softmax
//! normalizers, convolution sums) accumulates in `f64`.

use crate::error::{invalid, shape, Error, Result};

/// Row-major dense array of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(&shape, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                debug_assert!(i < n);
                acc * n + i
            })
    }

    pub fn at(&self, index: &[usize]) -> f32 {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f32) {
        let k = self.flat_index(index);
        self.data[k] = value;
    }

    /// Size of the innermost dimension; rows are contiguous slices of this length.
    pub fn row_len(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        self.numel() / self.row_len().max(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.row_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f32) -> Self {
        self.map(|v| v * factor)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape(format!("add {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    /// Adds a vector to every innermost row.
    pub fn add_row_broadcast(&self, row: &[f32]) -> Result<Self> {
        if row.len() != self.row_len() {
            return Err(shape(format!(
                "broadcast row of {} onto rows of {}",
                row.len(),
                self.row_len()
            )));
        }
        let mut out = self.clone();
        for chunk in out.data.chunks_mut(row.len()) {
            for (v, r) in chunk.iter_mut().zip(row) {
                *v += r;
            }
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

fn shape_err(shape: &[usize], len: usize) -> Error {
    Error::Shape(format!("shape {shape:?} does not hold {len} elements"))
}

/// Dot product with `f64` accumulation.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn as_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(shape(format!("{what} must be rank 2, got {s:?}"))),
    }
}

/// `a (m×k) · b (k×n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a, "lhs")?;
    let (k2, n) = as_matrix(b, "rhs")?;
    if k != k2 {
        return Err(shape(format!("matmul inner dims {k} vs {k2}")));
    }
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = a.row(i);
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            for (acc_v, &bv) in acc.iter_mut().zip(b.row(p)) {
                *acc_v += av * bv as f64;
            }
        }
        for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = *v as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a (m×k) · bᵀ` where `b` is `n×k`.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a, "lhs")?;
    let (n, k2) = as_matrix(b, "rhs")?;
    if k != k2 {
        return Err(shape(format!("matmul_bt inner dims {k} vs {k2}")));
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            out.push(dot(arow, b.row(j)) as f32);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(t: &Tensor, axis: usize) -> Result<Tensor> {
    let rank = t.rank();
    if axis >= rank {
        return Err(Error::Axis { axis, rank });
    }
    if t.data().iter().any(|v| v.is_nan()) {
        return Err(invalid("softmax input contains NaN"));
    }
    let s = t.shape();
    let outer: usize = s[..axis].iter().product();
    let n = s[axis];
    let inner: usize = s[axis + 1..].iter().product();
    let src = t.data();
    let mut out = vec![0.0f32; src.len()];
    let mut buf = vec![0.0f64; n];
    for o in 0..outer {
        for q in 0..inner {
            let base = o * n * inner + q;
            let max = (0..n)
                .map(|a| src[base + a * inner])
                .fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut total = 0.0f64;
            for (a, b) in buf.iter_mut().enumerate() {
                *b = (src[base + a * inner] as f64 - max).exp();
                total += *b;
            }
            for (a, b) in buf.iter().enumerate() {
                out[base + a * inner] = (b / total) as f32;
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Softmax over a plain slice, returned in `f64`.
pub fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Zero-padded "same" convolution.
///
/// `input` is `H×W×Cin`, `kernel` is `k×k×Cin×Cout` with `k` odd, and the
/// optional bias has `Cout` entries.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: Option<&[f32]>) -> Result<Tensor> {
    let [h, w, cin] = *input.shape() else {
        return Err(shape(format!("conv2d input must be H×W×C, got {:?}", input.shape())));
    };
    let [kh, kw, kcin, cout] = *kernel.shape() else {
        return Err(shape(format!(
            "conv2d kernel must be k×k×Cin×Cout, got {:?}",
            kernel.shape()
        )));
    };
    if kh != kw || kh % 2 == 0 {
        return Err(invalid(format!("conv2d kernel must be square and odd, got {kh}×{kw}")));
    }
    if kcin != cin {
        return Err(shape(format!("conv2d channel mismatch: input {cin}, kernel {kcin}")));
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(shape(format!("conv2d bias has {} entries, expected {cout}", b.len())));
        }
    }
    let half = (kh / 2) as isize;
    let kd = kernel.data();
    let mut out = vec![0.0f32; h * w * cout];
    let mut acc = vec![0.0f64; cout];
    for y in 0..h {
        for x in 0..w {
            match bias {
                Some(b) => acc.iter_mut().zip(b).for_each(|(a, &v)| *a = v as f64),
                None => acc.iter_mut().for_each(|a| *a = 0.0),
            }
            for dy in -half..=half {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in -half..=half {
                    let sx = x as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let px = input.row(sy as usize * w + sx as usize);
                    let kbase = (((dy + half) as usize) * kw + (dx + half) as usize) * cin * cout;
                    for (ci, &v) in px.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let v = v as f64;
                        let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (a, &kv) in acc.iter_mut().zip(krow) {
                            *a += v * kv as f64;
                        }
                    }
                }
            }
            let o = (y * w + x) * cout;
            for (dst, a) in out[o..o + cout].iter_mut().zip(&acc) {
                *dst = *a as f32;
            }
        }
    }
    Tensor::new(vec![h, w, cout], out)
}

const SAMPLE_EPS: f64 = 1e-9;

fn bilinear_at(map: &Tensor, x: f64, y: f64, out: &mut [f32]) -> bool {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let fin = x.is_finite() && y.is_finite();
    if !fin
        || x < -SAMPLE_EPS
        || y < -SAMPLE_EPS
        || x > (w - 1) as f64 + SAMPLE_EPS
        || y > (h - 1) as f64 + SAMPLE_EPS
    {
        return false;
    }
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let weights = [
        ((1.0 - fx) * (1.0 - fy), y0 * w + x0),
        (fx * (1.0 - fy), y0 * w + x1),
        ((1.0 - fx) * fy, y1 * w + x0),
        (fx * fy, y1 * w + x1),
    ];
    for (c, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for &(wt, idx) in &weights {
            if wt != 0.0 {
                acc += wt * map.row(idx)[c] as f64;
            }
        }
        *o = acc as f32;
    }
    true
}

fn check_map(map: &Tensor) -> Result<(usize, usize, usize)> {
    match *map.shape() {
        [h, w, c] if h > 0 && w > 0 => Ok((h, w, c)),
        _ => Err(shape(format!("sampling map must be non-empty H×W×C, got {:?}", map.shape()))),
    }
}

/// Bilinear sampling of an `H×W×C` map at texel coordinates `(x, y)`.
///
/// Integer coordinates reproduce the texel exactly. The first point outside
/// `[0, W-1]×[0, H-1]` aborts with [`Error::OutOfRange`].
pub fn bilinear_sample(map: &Tensor, points: &[(f64, f64)]) -> Result<Tensor> {
    let (_, _, c) = check_map(map)?;
    let mut out = vec![0.0f32; points.len() * c];
    for (i, &(x, y)) in points.iter().enumerate() {
        if !bilinear_at(map, x, y, &mut out[i * c..(i + 1) * c]) {
            return Err(Error::OutOfRange { index: i, x, y });
        }
    }
    Tensor::new(vec![points.len(), c], out)
}

/// Like [`bilinear_sample`] but keeps going: out-of-range rows are zero and
/// flagged `false` in the returned validity vector.
pub fn bilinear_sample_masked(map: &Tensor, points: &[(f64, f64)]) -> Result<(Tensor, Vec<bool>)> {
    let (_, _, c) = check_map(map)?;
    let mut out = vec![0.0f32; points.len() * c];
    let valid = points
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| bilinear_at(map, x, y, &mut out[i * c..(i + 1) * c]))
        .collect();
    Ok((Tensor::new(vec![points.len(), c], out)?, valid))
}

/// Row-wise layer normalization with affine parameters.
pub fn layer_norm(x: &Tensor, gamma: &[f32], beta: &[f32]) -> Result<Tensor> {
    let d = x.row_len();
    if gamma.len() != d || beta.len() != d {
        return Err(shape(format!("layer_norm params {} / {} for width {d}", gamma.len(), beta.len())));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = ((*v as f64 - mean) * inv * *g as f64 + *b as f64) as f32;
        }
    }
    Ok(out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: f32) -> f32 {
    x.max(0.0)
}

/// `elu(x) + 1`, the positive feature map used by linear attention.
pub fn elu_plus_one(x: f32) -> f32 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}
