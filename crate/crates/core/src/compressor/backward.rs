//! Reverse-mode gradients of the compressor with respect to its inputs
//! (content sequence and target tokens). Weights are treated as constants.

use super::{prepare, CompressorError, CompressorParams, LayerParams, LN_EPS};
use crate::numeric::{gelu, gelu_grad, scores_to_weights, Matrix, NumericError};

#[derive(Debug, Clone, PartialEq)]
pub struct CompressGradients {
    /// `∂loss/∂seq`, same shape as the content sequence.
    pub seq: Matrix,
    /// `∂loss/∂target_tokens`, same shape as the target sequence.
    pub target_tokens: Matrix,
}

struct NormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

fn norm_forward(x: &Matrix, gain: &[f64], bias: &[f64]) -> (Matrix, NormCache) {
    let n = x.cols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = xhat.row_mut(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        inv_std.push(inv);
    }
    let mut y = xhat.clone();
    for i in 0..y.rows() {
        for ((v, g), b) in y.row_mut(i).iter_mut().zip(gain).zip(bias) {
            *v = *v * g + b;
        }
    }
    (y, NormCache { xhat, inv_std })
}

fn norm_backward(cache: &NormCache, gain: &[f64], dy: &Matrix) -> Matrix {
    let n = dy.cols() as f64;
    let mut dx = Matrix::zeros(dy.rows(), dy.cols());
    for i in 0..dy.rows() {
        let xhat = cache.xhat.row(i);
        let dxhat: Vec<f64> = dy.row(i).iter().zip(gain).map(|(d, g)| d * g).collect();
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dxhat.iter().zip(xhat).map(|(d, x)| d * x).sum::<f64>() / n;
        let inv = cache.inv_std[i];
        for ((o, d), x) in dx.row_mut(i).iter_mut().zip(&dxhat).zip(xhat) {
            *o = inv * (d - mean_d - x * mean_dx);
        }
    }
    dx
}

struct LayerCache {
    ln1: NormCache,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    weights: Matrix,
    ln2: NormCache,
    h: Matrix,
}

fn layer_forward(layer: &LayerParams, z: &Matrix, mask: &Matrix) -> Result<(Matrix, LayerCache), NumericError> {
    let (a, ln1) = norm_forward(z, &layer.ln1_gain, &layer.ln1_bias);
    let q = a.matmul(&layer.wq)?;
    let k = a.matmul(&layer.wk)?;
    let v = a.matmul(&layer.wv)?;
    let weights = scores_to_weights(&q, &k, mask)?;
    let sa = weights.matmul(&v)?;
    let r = z.add(&sa)?;
    let (b, ln2) = norm_forward(&r, &layer.ln2_gain, &layer.ln2_bias);
    let mut h = b.matmul(&layer.w1)?;
    h.add_row_vector(&layer.b1)?;
    let mut f = h.map(gelu).matmul(&layer.w2)?;
    f.add_row_vector(&layer.b2)?;
    let out = f.add(z)?;
    Ok((out, LayerCache { ln1, q, k, v, weights, ln2, h }))
}

fn layer_backward(layer: &LayerParams, cache: &LayerCache, dout: &Matrix) -> Result<Matrix, NumericError> {
    // out = FF(LN2(r)) + z,  r = z + SA(LN1(z))
    let mut dz = dout.clone();
    let dg = dout.matmul(&layer.w2.transpose())?;
    let mut dh = dg;
    for (d, &x) in dh.as_mut_slice().iter_mut().zip(cache.h.as_slice()) {
        *d *= gelu_grad(x);
    }
    let db = dh.matmul(&layer.w1.transpose())?;
    let dr = norm_backward(&cache.ln2, &layer.ln2_gain, &db);
    dz = dz.add(&dr)?;

    // attention: sa = P v,  P = softmax(q kᵀ / √d_k + mask)
    let dsa = dr;
    let dp = dsa.matmul(&cache.v.transpose())?;
    let dv = cache.weights.transpose().matmul(&dsa)?;
    let scale = 1.0 / (cache.k.cols() as f64).sqrt();
    let mut ds = Matrix::zeros(dp.rows(), dp.cols());
    for i in 0..dp.rows() {
        let p = cache.weights.row(i);
        let g = dp.row(i);
        let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((o, &pi), &gi) in ds.row_mut(i).iter_mut().zip(p).zip(g) {
            *o = pi * (gi - inner) * scale;
        }
    }
    let dq = ds.matmul(&cache.k)?;
    let dk = ds.transpose().matmul(&cache.q)?;
    let da = dq
        .matmul(&layer.wq.transpose())?
        .add(&dk.matmul(&layer.wk.transpose())?)?
        .add(&dv.matmul(&layer.wv.transpose())?)?;
    dz.add(&norm_backward(&cache.ln1, &layer.ln1_gain, &da))
}

/// Gradients of `Σ d_out ⊙ compress(seq)` with respect to `seq` and the
/// target tokens, for an upstream gradient `d_out` of shape `y × d_model`.
pub fn compress_backward(
    seq: &Matrix,
    params: &CompressorParams,
    d_out: &Matrix,
) -> Result<CompressGradients, CompressorError> {
    let y = params.output_len();
    if d_out.shape() != (y, params.d_model()) {
        return Err(CompressorError::InvalidInput(format!(
            "upstream gradient {:?} for output {:?}",
            d_out.shape(),
            (y, params.d_model())
        )));
    }
    let (mut z, mask) = prepare(seq, params, y)?;
    let mut caches = Vec::with_capacity(params.num_layers());
    for layer in &params.layers {
        let (next, cache) = layer_forward(layer, &z, &mask)?;
        caches.push(cache);
        z = next;
    }
    let x = seq.rows();
    let mut dz = Matrix::zeros(x + y, params.d_model());
    for i in 0..y {
        dz.row_mut(x + i).copy_from_slice(d_out.row(i));
    }
    for (layer, cache) in params.layers.iter().zip(&caches).rev() {
        dz = layer_backward(layer, cache, &dz)?;
    }
    Ok(CompressGradients { seq: dz.slice_rows(0, x), target_tokens: dz.slice_rows(x, x + y) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressor::{compress, CompressorKind, CompressorShape};
    use crate::numeric::{finite_diff_grad, relative_error};
    use crate::seed;

    fn mean_output(seq: &Matrix, params: &CompressorParams) -> f64 {
        let out = compress(seq, params).unwrap();
        out.sum() / (out.rows() * out.cols()) as f64
    }

    #[test]
    fn forward_cache_matches_plain_forward() {
        let p = CompressorParams::init(CompressorKind::Refine, CompressorShape::new(8), 2, 3);
        let mut r = seed::rng(4);
        let s = seed::gaussian_matrix(&mut r, 4, 8, 1.0);
        let (z, mask) = prepare(&s, &p, 2).unwrap();
        let (a, _) = layer_forward(&p.layers[0], &z, &mask).unwrap();
        let b = p.layers[0].forward(&z, &mask).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for trial in 0..3u64 {
            let p = CompressorParams::init(CompressorKind::Refine, CompressorShape::new(8), 2, 100 + trial);
            let mut r = seed::rng(200 + trial);
            let s = seed::gaussian_matrix(&mut r, 4, 8, 1.0);
            let d_out = Matrix::from_fn(2, 8, |_, _| 1.0 / 16.0);
            let grads = compress_backward(&s, &p, &d_out).unwrap();

            let fd_seq = finite_diff_grad(
                |flat| mean_output(&Matrix::from_vec(4, 8, flat.to_vec()).unwrap(), &p),
                s.as_slice(),
                1e-5,
            );
            assert!(relative_error(grads.seq.as_slice(), &fd_seq) < 1e-4);

            let fd_target = finite_diff_grad(
                |flat| {
                    let mut q = p.clone();
                    q.target_tokens = Matrix::from_vec(2, 8, flat.to_vec()).unwrap();
                    mean_output(&s, &q)
                },
                p.target_tokens.as_slice(),
                1e-5,
            );
            assert!(relative_error(grads.target_tokens.as_slice(), &fd_target) < 1e-4);
        }
    }
}
