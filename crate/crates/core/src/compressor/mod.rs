//! Lightweight masked-attention compressor.
//!
//! The same architecture backs three instances: the key compressor (one
//! output row), the merging compressor (`l_max` rows) and the refinement
//! compressor (`L` rows). The content sequence `S` is concatenated with a
//! learnable target sequence `T`, `z = [S; T]`, and each layer applies
//!
//! ```text
//! z' = FF(LN₂(z + SA(LN₁(z)))) + z
//! ```
//!
//! where `SA` is single-head attention with an additive mask that blocks
//! content rows from attending to target rows. The target rows of the final
//! layer are the compressed output.
//!
//! The residual placement follows a pre-LN reading of the layer formula; the
//! post-LN alternative `LN(z + SA(z))` would move the first normalisation
//! outside the attention input.

mod backward;

pub use backward::{compress_backward, CompressGradients};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{feed_forward, layer_norm, masked_attention, Matrix, NumericError, MASK_CONSTANT};
use crate::seed;

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompressorError {
    #[error("cannot compress an empty sequence")]
    EmptyInput,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressorKind {
    Key,
    Merge,
    Refine,
}

impl CompressorKind {
    pub fn label(self) -> &'static str {
        match self {
            CompressorKind::Key => "compressor/key",
            CompressorKind::Merge => "compressor/merge",
            CompressorKind::Refine => "compressor/refine",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
}

impl LayerParams {
    fn init(rng: &mut ChaCha8Rng, d_model: usize, d_ff: usize) -> Self {
        let std = 1.0 / (d_model as f64).sqrt();
        Self {
            wq: seed::gaussian_matrix(rng, d_model, d_model, std),
            wk: seed::gaussian_matrix(rng, d_model, d_model, std),
            wv: seed::gaussian_matrix(rng, d_model, d_model, std),
            w1: seed::gaussian_matrix(rng, d_model, d_ff, std),
            b1: vec![0.0; d_ff],
            w2: seed::gaussian_matrix(rng, d_ff, d_model, 1.0 / (d_ff as f64).sqrt()),
            b2: vec![0.0; d_model],
            ln1_gain: vec![1.0; d_model],
            ln1_bias: vec![0.0; d_model],
            ln2_gain: vec![1.0; d_model],
            ln2_bias: vec![0.0; d_model],
        }
    }

    /// Every weight, gain and bias set to zero.
    pub fn zeroed(d_model: usize, d_ff: usize) -> Self {
        Self {
            wq: Matrix::zeros(d_model, d_model),
            wk: Matrix::zeros(d_model, d_model),
            wv: Matrix::zeros(d_model, d_model),
            w1: Matrix::zeros(d_model, d_ff),
            b1: vec![0.0; d_ff],
            w2: Matrix::zeros(d_ff, d_model),
            b2: vec![0.0; d_model],
            ln1_gain: vec![0.0; d_model],
            ln1_bias: vec![0.0; d_model],
            ln2_gain: vec![0.0; d_model],
            ln2_bias: vec![0.0; d_model],
        }
    }

    fn is_finite(&self) -> bool {
        [&self.wq, &self.wk, &self.wv, &self.w1, &self.w2].iter().all(|m| m.is_finite())
            && [&self.b1, &self.b2, &self.ln1_gain, &self.ln1_bias, &self.ln2_gain, &self.ln2_bias]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// One compressor layer; returns the next representation.
    pub(crate) fn forward(&self, z: &Matrix, mask: &Matrix) -> Result<Matrix, NumericError> {
        let a = layer_norm(z, &self.ln1_gain, &self.ln1_bias, LN_EPS)?;
        let sa = masked_attention(&a, &self.wq, &self.wk, &self.wv, mask)?;
        let r = z.add(&sa)?;
        let b = layer_norm(&r, &self.ln2_gain, &self.ln2_bias, LN_EPS)?;
        feed_forward(&b, &self.w1, &self.b1, &self.w2, &self.b2)?.add(z)
    }
}

/// Architecture hyper-parameters shared by all three instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressorShape {
    pub d_model: usize,
    pub num_layers: usize,
    pub d_ff: usize,
}

impl CompressorShape {
    pub fn new(d_model: usize) -> Self {
        Self { d_model, num_layers: 2, d_ff: 4 * d_model }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressorParams {
    pub kind: CompressorKind,
    pub layers: Vec<LayerParams>,
    /// The learnable target sequence, one row per output row.
    pub target_tokens: Matrix,
}

impl CompressorParams {
    /// Seeded Gaussian initialisation: weights at scale `1/√d_model`,
    /// target tokens at scale 0.02.
    pub fn init(kind: CompressorKind, shape: CompressorShape, output_len: usize, seed: u64) -> Self {
        assert!(output_len >= 1, "compressor output length must be at least 1");
        let mut rng = seed::rng(seed);
        let layers = (0..shape.num_layers).map(|_| LayerParams::init(&mut rng, shape.d_model, shape.d_ff)).collect();
        let target_tokens = seed::gaussian_matrix(&mut rng, output_len, shape.d_model, 0.02);
        Self { kind, layers, target_tokens }
    }

    pub fn d_model(&self) -> usize {
        self.target_tokens.cols()
    }

    pub fn output_len(&self) -> usize {
        self.target_tokens.rows()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<(), CompressorError> {
        let d = self.d_model();
        if self.output_len() == 0 {
            return Err(CompressorError::InvalidInput("target sequence is empty".into()));
        }
        if self.kind == CompressorKind::Key && self.output_len() != 1 {
            return Err(CompressorError::InvalidInput("key compressor must emit one row".into()));
        }
        if !self.target_tokens.is_finite() || !self.layers.iter().all(LayerParams::is_finite) {
            return Err(CompressorError::InvalidInput("non-finite compressor weight".into()));
        }
        for l in &self.layers {
            let ok = l.wq.shape() == (d, d)
                && l.wk.shape() == (d, d)
                && l.wv.shape() == (d, d)
                && l.w1.rows() == d
                && l.w2.shape() == (l.w1.cols(), d)
                && l.b1.len() == l.w1.cols()
                && l.b2.len() == d
                && [&l.ln1_gain, &l.ln1_bias, &l.ln2_gain, &l.ln2_bias].iter().all(|v| v.len() == d);
            if !ok {
                return Err(CompressorError::InvalidInput("layer shapes do not match d_model".into()));
            }
        }
        Ok(())
    }
}

/// Additive attention mask over `x` content rows followed by `y` target rows:
/// `-c` where a content row would attend to a target row, 0 elsewhere.
pub fn build_mask(content_len: usize, target_len: usize, c: f64) -> Matrix {
    let n = content_len + target_len;
    Matrix::from_fn(n, n, |i, j| if i < content_len && j >= content_len { -c } else { 0.0 })
}

fn prepare(seq: &Matrix, params: &CompressorParams, target_len: usize) -> Result<(Matrix, Matrix), CompressorError> {
    if seq.rows() == 0 {
        return Err(CompressorError::EmptyInput);
    }
    if seq.cols() != params.d_model() {
        return Err(CompressorError::InvalidInput(format!(
            "sequence width {} for d_model {}",
            seq.cols(),
            params.d_model()
        )));
    }
    if !seq.is_finite() {
        return Err(CompressorError::InvalidInput("non-finite sequence".into()));
    }
    if target_len == 0 || target_len > params.output_len() {
        return Err(CompressorError::InvalidInput(format!(
            "target length {target_len} outside 1..={}",
            params.output_len()
        )));
    }
    let target = params.target_tokens.slice_rows(0, target_len);
    let z = Matrix::vstack([seq, &target])?;
    Ok((z, build_mask(seq.rows(), target_len, MASK_CONSTANT)))
}

/// Representation after every layer, starting with the input `[seq; target]`.
pub fn compress_traced(seq: &Matrix, params: &CompressorParams) -> Result<Vec<Matrix>, CompressorError> {
    compress_traced_with_mask(seq, params, MASK_CONSTANT)
}

/// [`compress_traced`] with an explicit mask magnitude, for fault injection.
pub fn compress_traced_with_mask(seq: &Matrix, params: &CompressorParams, mask_constant: f64) -> Result<Vec<Matrix>, CompressorError> {
    let (mut z, _) = prepare(seq, params, params.output_len())?;
    let mask = build_mask(seq.rows(), params.output_len(), mask_constant);
    let mut trace = Vec::with_capacity(params.num_layers() + 1);
    trace.push(z.clone());
    for layer in &params.layers {
        z = layer.forward(&z, &mask)?;
        trace.push(z.clone());
    }
    Ok(trace)
}

/// Compresses `seq` (`x × d_model`) to `y × d_model`, `y` being the number
/// of target tokens.
pub fn compress(seq: &Matrix, params: &CompressorParams) -> Result<Matrix, CompressorError> {
    compress_with_len(seq, params, params.output_len())
}

/// Like [`compress`] but only the first `target_len` target tokens take part.
pub fn compress_with_len(seq: &Matrix, params: &CompressorParams, target_len: usize) -> Result<Matrix, CompressorError> {
    let (mut z, mask) = prepare(seq, params, target_len)?;
    for layer in &params.layers {
        z = layer.forward(&z, &mask)?;
    }
    Ok(z.slice_rows(seq.rows(), seq.rows() + target_len))
}

/// Merges a base value with the values grouped onto it.
///
/// Output length is `min(l_max, longest operand)` so a merge never produces
/// a value longer than its inputs.
pub fn merge_values(base: &Matrix, others: &[&Matrix], params: &CompressorParams) -> Result<Matrix, CompressorError> {
    if others.is_empty() {
        return Err(CompressorError::InvalidInput("merge needs at least one other value".into()));
    }
    let longest = others.iter().map(|m| m.rows()).chain(std::iter::once(base.rows())).max().unwrap_or(0);
    let seq = Matrix::vstack(std::iter::once(base).chain(others.iter().copied()))?;
    compress_with_len(&seq, params, params.output_len().min(longest.max(1)))
}

/// Refines retrieved values into an injected memory of exactly `L` rows.
pub fn refine_values(values: &[&Matrix], params: &CompressorParams) -> Result<Matrix, CompressorError> {
    if values.is_empty() {
        return Err(CompressorError::InvalidInput("refine needs at least one value".into()));
    }
    let seq = Matrix::vstack(values.iter().copied())?;
    compress(&seq, params)
}

/// The three compressor instances used by the memory system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressorSet {
    pub key: CompressorParams,
    pub merge: CompressorParams,
    pub refine: CompressorParams,
}

impl CompressorSet {
    /// Independent seeded initialisations; no weights are shared.
    pub fn init(shape: CompressorShape, merge_len: usize, memory_len: usize, master_seed: u64) -> Self {
        let make = |kind: CompressorKind, len| CompressorParams::init(kind, shape, len, seed::derive(master_seed, kind.label()));
        Self {
            key: make(CompressorKind::Key, 1),
            merge: make(CompressorKind::Merge, merge_len),
            refine: make(CompressorKind::Refine, memory_len),
        }
    }
}
