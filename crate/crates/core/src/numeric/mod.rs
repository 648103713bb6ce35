//! Dense kernels shared by every other module: softmax/entropy, layer
//! normalisation, masked attention, the feed-forward block, bilinear
//! downsampling, cosine similarity and a central-difference gradient oracle.
//!
//! Logarithms are natural throughout. Every reduction runs in a fixed
//! row-major order so results are reproducible bit for bit.

mod image;
mod matrix;

pub use image::{bilinear_downsample, Image};
pub use matrix::{dot, norm, Matrix};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty input")]
    Empty,
}

/// Additive mask value that removes an attention edge. `exp(-1e9)` underflows
/// to exactly zero in double precision.
pub const MASK_CONSTANT: f64 = 1e9;

/// Tempered, max-shifted softmax.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>, NumericError> {
    if logits.is_empty() {
        return Err(NumericError::Empty);
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(NumericError::InvalidInput(format!("temperature {temperature}")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NumericError::InvalidInput("non-finite logit".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| ((z - max) / temperature).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// In-place row softmax of a score row that may contain masked (`-C`) cells.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Shannon entropy in nats, clamped to `[0, ln(dim)]`; `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    let h: f64 = -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
    // `+ 0.0` turns a negative zero into positive zero
    h.clamp(0.0, (p.len().max(1) as f64).ln()) + 0.0
}

/// Gradient of `entropy(softmax(z / t))` with respect to the logits `z`.
///
/// `∂H/∂z_j = -p_j (ln p_j + H) / t`.
pub fn entropy_softmax_grad(logits: &[f64], temperature: f64) -> Result<Vec<f64>, NumericError> {
    let p = softmax(logits, temperature)?;
    let h: f64 = -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
    Ok(p.iter()
        .map(|&pj| if pj > 0.0 { -pj * (pj.ln() + h) / temperature } else { 0.0 })
        .collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Row-wise layer normalisation with population variance.
pub fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> Result<Matrix, NumericError> {
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(NumericError::ShapeMismatch(format!(
            "layer norm over {} columns with gain {} / bias {}",
            x.cols(),
            gain.len(),
            bias.len()
        )));
    }
    let mut out = x.clone();
    let n = x.cols() as f64;
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gain).zip(bias) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

/// Attention probabilities `softmax(QKᵀ/√d_k + mask)` for input `z`.
pub fn attention_weights(
    z: &Matrix,
    wq: &Matrix,
    wk: &Matrix,
    mask: &Matrix,
) -> Result<Matrix, NumericError> {
    let q = z.matmul(wq)?;
    let k = z.matmul(wk)?;
    scores_to_weights(&q, &k, mask)
}

pub(crate) fn scores_to_weights(q: &Matrix, k: &Matrix, mask: &Matrix) -> Result<Matrix, NumericError> {
    let n = q.rows();
    if mask.shape() != (n, n) {
        return Err(NumericError::ShapeMismatch(format!(
            "mask {:?} for {n} tokens",
            mask.shape()
        )));
    }
    let scale = 1.0 / (k.cols() as f64).sqrt();
    let mut s = q.matmul_transposed(k)?;
    for (v, m) in s.as_mut_slice().iter_mut().zip(mask.as_slice()) {
        *v = *v * scale + m;
    }
    for i in 0..n {
        softmax_in_place(s.row_mut(i));
    }
    Ok(s)
}

/// Single-head masked self-attention:
/// `softmax((zW_q)(zW_k)ᵀ/√d_k + mask)(zW_v)`.
pub fn masked_attention(
    z: &Matrix,
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
    mask: &Matrix,
) -> Result<Matrix, NumericError> {
    if wq.cols() != wk.cols() {
        return Err(NumericError::ShapeMismatch("query/key widths differ".into()));
    }
    let weights = attention_weights(z, wq, wk, mask)?;
    let v = z.matmul(wv)?;
    weights.matmul(&v)
}

/// Position-wise `gelu(xW₁ + b₁)W₂ + b₂`.
pub fn feed_forward(
    x: &Matrix,
    w1: &Matrix,
    b1: &[f64],
    w2: &Matrix,
    b2: &[f64],
) -> Result<Matrix, NumericError> {
    let mut h = x.matmul(w1)?;
    h.add_row_vector(b1)?;
    let g = h.map(gelu);
    let mut out = g.matmul(w2)?;
    out.add_row_vector(b2)?;
    Ok(out)
}

/// Cosine similarity, plus a flag set when either argument has zero norm
/// (in which case the similarity is defined as 0).
pub fn cosine_sim_flagged(a: &[f64], b: &[f64]) -> (f64, bool) {
    assert_eq!(a.len(), b.len(), "cosine_sim on vectors of different dims");
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return (0.0, true);
    }
    // `+ 0.0` folds -0.0 into 0.0 so orthogonal pairs tie under total ordering
    ((dot(a, b) / (na * nb)).clamp(-1.0, 1.0) + 0.0, false)
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    cosine_sim_flagged(a, b).0
}

/// Central differences `(f(x + εe_j) − f(x − εe_j)) / 2ε`.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            let orig = probe[j];
            probe[j] = orig + eps;
            let up = f(&probe);
            probe[j] = orig - eps;
            let down = f(&probe);
            probe[j] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)` between two gradients.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}
