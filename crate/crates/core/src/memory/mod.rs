//! Latent memory: perception units built from image blocks and thinking
//! units cut from decode trajectories at high-entropy delimiters.

mod bank;

pub use bank::{InsertReport, MemoryBank, OverflowReport, QuantilePartition};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentError, AgentSpec, DecodeTrace, ProjectorParams, VisionEncoder};
use crate::compressor::{compress, CompressorError, CompressorParams};
use crate::numeric::{bilinear_downsample, Image, Matrix};
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemoryError {
    #[error("memory value is empty")]
    EmptyValue,
    #[error("global similarity needs at least two units, bank has {0}")]
    UndefinedSimilarity(usize),
    #[error("unit index {index} out of range for bank of {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("duplicate unit index {0} in one retrieval")]
    DuplicateIndex(usize),
    #[error("expected a {expected:?} bank")]
    KindMismatch { expected: MemoryKind },
    #[error("cannot segment an empty trace")]
    EmptyTrace,
    #[error("image geometry: {0}")]
    Geometry(String),
    #[error(transparent)]
    Compressor(#[from] CompressorError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryKind {
    Perception,
    Thinking,
}

impl MemoryKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MemoryKind::Perception => "perception",
            MemoryKind::Thinking => "thinking",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryUnit {
    pub key: Vec<f64>,
    pub value: Matrix,
    pub kind: MemoryKind,
    /// Bank trigger counter at insertion.
    pub inserted_at: u64,
    pub hit_count: u64,
}

impl MemoryUnit {
    pub fn new(kind: MemoryKind, value: Matrix, key_params: &CompressorParams) -> Result<Self, MemoryError> {
        let key = make_key(&value, key_params)?;
        Ok(Self { key, value, kind, inserted_at: 0, hit_count: 0 })
    }

    /// Numerator and denominator of the triggering rate.
    pub fn rate_parts(&self, global_trigger_count: u64) -> (u64, u64) {
        (self.hit_count, global_trigger_count.saturating_sub(self.inserted_at).max(1))
    }

    pub fn trigger_rate(&self, global_trigger_count: u64) -> f64 {
        let (n, d) = self.rate_parts(global_trigger_count);
        n as f64 / d as f64
    }
}

/// Retrieval key: the single output row of the key compressor.
pub fn make_key(value: &Matrix, key_params: &CompressorParams) -> Result<Vec<f64>, MemoryError> {
    if value.rows() == 0 {
        return Err(MemoryError::EmptyValue);
    }
    Ok(compress(value, key_params)?.row(0).to_vec())
}

/// One perception unit per full-resolution block, in row-major block order.
pub fn synthesize_perception(
    image: &Image,
    encoder: &VisionEncoder,
    projector: &ProjectorParams,
    key_params: &CompressorParams,
) -> Result<Vec<MemoryUnit>, MemoryError> {
    let side = encoder.block_side();
    if !image.height().is_multiple_of(side) || !image.width().is_multiple_of(side) || image.height() == 0 || image.width() == 0 {
        return Err(MemoryError::Geometry(format!(
            "{}x{} image is not a whole number of {side}x{side} blocks",
            image.height(),
            image.width()
        )));
    }
    let mut units = Vec::new();
    for by in (0..image.height()).step_by(side) {
        for bx in (0..image.width()).step_by(side) {
            let block = image.crop(by, bx, side).map_err(|e| MemoryError::Geometry(e.to_string()))?;
            let mut parts = Vec::with_capacity(encoder.granularity());
            for level in 0..encoder.granularity() {
                let down = bilinear_downsample(&block, 1 << level).map_err(|e| MemoryError::Geometry(e.to_string()))?;
                parts.push(projector.project_rows(&encoder.encode(&down, level)?)?);
            }
            let value = Matrix::vstack(parts.iter()).map_err(CompressorError::from)?;
            units.push(MemoryUnit::new(MemoryKind::Perception, value, key_params)?);
        }
    }
    Ok(units)
}

/// Cut probability after a step: normalised entropy on delimiters, zero elsewhere.
pub fn boundary_prob(token: u32, entropy: f64, delimiter_count: usize, vocab_size: usize) -> f64 {
    if (token as usize) >= delimiter_count {
        return 0.0;
    }
    (entropy / (vocab_size as f64).ln()).clamp(0.0, 1.0)
}

/// A contiguous span `start..end` of a trajectory with its hidden rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub start: usize,
    pub end: usize,
    pub hidden: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SegmentRule {
    /// Bernoulli cut per step drawn from a seeded stream.
    Sampled { seed: u64 },
    /// Cut wherever the boundary probability reaches the threshold.
    Threshold(f64),
}

pub fn segment_trajectory(trace: &DecodeTrace, spec: &AgentSpec, rule: SegmentRule) -> Result<Vec<Chunk>, MemoryError> {
    if trace.is_empty() {
        return Err(MemoryError::EmptyTrace);
    }
    let mut rng = match rule {
        SegmentRule::Sampled { seed } => Some(seed::rng(seed)),
        SegmentRule::Threshold(_) => None,
    };
    let n = trace.len();
    let mut chunks = Vec::new();
    let mut start = 0;
    for (i, step) in trace.steps.iter().enumerate() {
        let p = boundary_prob(step.token, step.entropy, spec.delimiter_count, spec.vocab_size);
        let cut = match (&mut rng, rule) {
            (Some(r), _) => r.random::<f64>() < p,
            (None, SegmentRule::Threshold(t)) => p >= t,
            (None, SegmentRule::Sampled { .. }) => unreachable!(),
        };
        if cut && i + 1 < n {
            chunks.push(Chunk { start, end: i + 1, hidden: trace.hidden_rows(start, i + 1) });
            start = i + 1;
        }
    }
    chunks.push(Chunk { start, end: n, hidden: trace.hidden_rows(start, n) });
    Ok(chunks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{run_turn, DecodeStep, NoHooks, Phase, TurnInputs};
    use crate::compressor::{CompressorKind, CompressorShape};
    use proptest::prelude::*;

    fn key_params(d: usize) -> CompressorParams {
        CompressorParams::init(CompressorKind::Key, CompressorShape::new(d), 1, 17)
    }

    fn spec() -> AgentSpec {
        AgentSpec {
            seed: 1,
            vocab_size: 1024,
            d_model: 8,
            d_v: 8,
            output_len: 60,
            entropy_profile: vec![Phase::new(10, 1e-3), Phase::new(10, 2.0)],
            delimiter_count: 16,
            delimiter_rate: 0.25,
        }
    }

    fn trace_from(tokens: &[(u32, f64)]) -> DecodeTrace {
        DecodeTrace {
            steps: tokens
                .iter()
                .enumerate()
                .map(|(i, &(token, entropy))| DecodeStep { token, entropy, hidden: vec![i as f64; 8], injected: None })
                .collect(),
            ledger: Default::default(),
        }
    }

    #[test]
    fn keys_are_deterministic_and_distinct() {
        let kp = key_params(8);
        let mut r = seed::rng(3);
        let mut prev: Option<Vec<f64>> = None;
        for _ in 0..100 {
            let v = seed::gaussian_matrix(&mut r, 5, 8, 1.0);
            let k = make_key(&v, &kp).unwrap();
            assert_eq!(k.len(), 8);
            assert_eq!(k, make_key(&v, &kp).unwrap());
            if let Some(p) = &prev {
                assert_ne!(p, &k);
            }
            prev = Some(k);
        }
        assert_eq!(make_key(&Matrix::zeros(0, 8), &kp), Err(MemoryError::EmptyValue));
    }

    #[test]
    fn perception_units_per_block() {
        let enc = VisionEncoder::new(3, 4, 3, 8, 1).unwrap();
        let proj = ProjectorParams::init(8, 8, 2);
        let kp = key_params(8);
        let img = Image::from_fn(32, 32, 3, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f64 / 11.0);
        let units = synthesize_perception(&img, &enc, &proj, &kp).unwrap();
        assert_eq!(units.len(), 1);
        assert_eq!(units[0].value.rows(), 21);

        let tall = Image::from_fn(64, 32, 3, |y, x, c| ((y % 32) * 7 + x * 3 + c) as f64 / 300.0);
        let units = synthesize_perception(&tall, &enc, &proj, &kp).unwrap();
        assert_eq!(units.len(), 2);
        assert_eq!(units[0].value, units[1].value);
        assert_eq!(units[0].key, units[1].key);

        assert!(matches!(synthesize_perception(&Image::constant(40, 32, 3, 0.0), &enc, &proj, &kp), Err(MemoryError::Geometry(_))));
    }

    #[test]
    fn boundary_probability_cases() {
        let ln_v = 1024f64.ln();
        assert_eq!(boundary_prob(500, ln_v, 16, 1024), 0.0);
        assert!((boundary_prob(3, 0.5 * ln_v, 16, 1024) - 0.5).abs() < 1e-12);
        assert_eq!(boundary_prob(3, 1.2 * ln_v, 16, 1024), 1.0);
    }

    #[test]
    fn segmentation_cases() {
        let s = spec();
        let ln_v = 1024f64.ln();
        let plain = trace_from(&[(100, ln_v); 12]);
        let chunks = segment_trajectory(&plain, &s, SegmentRule::Sampled { seed: 4 }).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!((chunks[0].start, chunks[0].end), (0, 12));

        let mut steps = vec![(100, 0.0); 12];
        steps[5] = (2, ln_v);
        let chunks = segment_trajectory(&trace_from(&steps), &s, SegmentRule::Threshold(0.5)).unwrap();
        assert_eq!(chunks.iter().map(|c| (c.start, c.end)).collect::<Vec<_>>(), vec![(0, 6), (6, 12)]);
        assert_eq!(chunks[1].hidden.row(0), &[6.0; 8]);

        assert_eq!(segment_trajectory(&DecodeTrace::default(), &s, SegmentRule::Threshold(0.5)), Err(MemoryError::EmptyTrace));
    }

    #[test]
    fn chunks_partition_real_traces() {
        let s = spec();
        let trace = run_turn(&s, TurnInputs::default(), &mut NoHooks).unwrap();
        for seed in 0..50 {
            let chunks = segment_trajectory(&trace, &s, SegmentRule::Sampled { seed }).unwrap();
            assert_eq!(chunks[0].start, 0);
            assert_eq!(chunks.last().unwrap().end, trace.len());
            assert!(chunks.windows(2).all(|w| w[0].end == w[1].start));
            assert!(chunks.iter().all(|c| c.end > c.start && c.hidden.rows() == c.end - c.start));
        }
    }

    proptest! {
        #[test]
        fn prop_chunks_partition(tokens in prop::collection::vec((0u32..40, 0.0f64..8.0), 1..120), seed in any::<u64>()) {
            let mut s = spec();
            s.vocab_size = 40;
            s.delimiter_count = 8;
            let trace = trace_from(&tokens);
            for rule in [SegmentRule::Sampled { seed }, SegmentRule::Threshold(0.3)] {
                let chunks = segment_trajectory(&trace, &s, rule).unwrap();
                prop_assert_eq!(chunks[0].start, 0);
                prop_assert_eq!(chunks.last().unwrap().end, tokens.len());
                prop_assert!(chunks.windows(2).all(|w| w[0].end == w[1].start));
                prop_assert!(chunks.iter().all(|c| c.end > c.start));
            }
        }

        #[test]
        fn prop_boundary_prob_in_unit_interval(token in 0u32..64, h in 0.0f64..20.0) {
            let p = boundary_prob(token, h, 16, 64);
            prop_assert!((0.0..=1.0).contains(&p));
            if token >= 16 { prop_assert_eq!(p, 0.0); }
        }
    }
}
