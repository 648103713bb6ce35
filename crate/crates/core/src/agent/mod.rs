//! Deterministic stand-in for a frozen VLM agent.
//!
//! The mock decoder replaces a real backbone: logits come from a seeded
//! hash-mixing recurrence over `(seed, step, digest(hidden, context))`,
//! the emitted token is the argmax (greedy decoding), and the per-step
//! entropy is shaped by a piecewise-constant temperature profile. Hidden
//! states follow `h' = tanh(E[token] + A·h + c)` where `c` is the injected
//! memory context, so an injection at step `s` leaves steps `< s` untouched
//! and perturbs everything after it.
//!
//! Logit construction: every vocabulary entry gets uniform noise in
//! `[-2, 2]` and one planted token gets `+5`, so the winner leads by at
//! least 1. At temperature `1e-3` all other probabilities underflow and the
//! step entropy is exactly zero; at large temperatures it approaches
//! `ln |V|`.

mod vision;

pub use vision::{granularity_len, ProjectorParams, VisionEncoder};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::MemoryKind;
use crate::numeric::{entropy, softmax, Matrix};
use crate::seed::{self, mix, splitmix64, unit_f64};
use crate::topology::TokenBreakdown;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("invalid agent spec: {0}")]
    InvalidSpec(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

const NOISE_AMPLITUDE: f64 = 2.0;
const PLANTED_MARGIN: f64 = 5.0;

/// One segment of the temperature profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub len: usize,
    pub temperature: f64,
}

impl Phase {
    pub fn new(len: usize, temperature: f64) -> Self {
        Self { len, temperature }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub seed: u64,
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_v: usize,
    pub output_len: usize,
    /// Cycled when shorter than `output_len`.
    pub entropy_profile: Vec<Phase>,
    /// Token ids `0..delimiter_count` form the delimiter set.
    pub delimiter_count: usize,
    /// Probability that a step's planted token is a delimiter.
    pub delimiter_rate: f64,
}

impl AgentSpec {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::InvalidSpec(m.to_string()));
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.output_len == 0 {
            return bad("output_len must be at least 1");
        }
        if self.d_model == 0 || self.d_v == 0 {
            return bad("dimensions must be positive");
        }
        if self.entropy_profile.is_empty() || self.entropy_profile.iter().all(|p| p.len == 0) {
            return bad("entropy profile is empty");
        }
        if self.entropy_profile.iter().any(|p| !(p.temperature > 0.0 && p.temperature.is_finite())) {
            return bad("profile temperatures must be positive");
        }
        if self.delimiter_count >= self.vocab_size {
            return bad("delimiter set must leave non-delimiter tokens");
        }
        if !(0.0..=1.0).contains(&self.delimiter_rate) {
            return bad("delimiter_rate must lie in [0, 1]");
        }
        Ok(())
    }

    /// Decoding temperature at `step`.
    pub fn temperature_at(&self, step: usize) -> f64 {
        let period: usize = self.entropy_profile.iter().map(|p| p.len).sum();
        let mut offset = step % period;
        for phase in &self.entropy_profile {
            if offset < phase.len {
                return phase.temperature;
            }
            offset -= phase.len;
        }
        unreachable!("offset is bounded by the profile period")
    }

    pub fn is_delimiter(&self, token: u32) -> bool {
        (token as usize) < self.delimiter_count
    }
}

/// One decoded step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub token: u32,
    pub logits: Vec<f64>,
    pub entropy: f64,
    pub hidden: Vec<f64>,
}

/// Memory spliced into the decode context by an orchestration hook.
#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub kind: MemoryKind,
    pub retrieved: Vec<usize>,
    pub memory: Matrix,
}

/// Record of an injection on the step it followed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionMark {
    pub kind: MemoryKind,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeStep {
    pub token: u32,
    pub entropy: f64,
    pub hidden: Vec<f64>,
    pub injected: Option<InjectionMark>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecodeTrace {
    pub steps: Vec<DecodeStep>,
    pub ledger: TokenBreakdown,
}

impl DecodeTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn entropies(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.entropy).collect()
    }

    /// Hidden states of steps `start..end` stacked as rows.
    pub fn hidden_rows(&self, start: usize, end: usize) -> Matrix {
        let d = self.steps.first().map_or(0, |s| s.hidden.len());
        let mut data = Vec::with_capacity((end - start) * d);
        for s in &self.steps[start..end] {
            data.extend_from_slice(&s.hidden);
        }
        Matrix::from_vec(end - start, d, data).expect("hidden rows share one width")
    }

    pub fn injection_steps(&self) -> Vec<usize> {
        self.steps.iter().enumerate().filter(|(_, s)| s.injected.is_some()).map(|(i, _)| i).collect()
    }
}

/// Orchestration callbacks invoked after every decode step.
pub trait DecodeHooks {
    /// `trace` already contains the step just decoded. Returning an
    /// injection splices its memory into the context before the next step.
    fn after_step(&mut self, spec: &AgentSpec, trace: &DecodeTrace) -> Option<Injection>;
}

/// Baseline mode: never injects.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoHooks;

impl DecodeHooks for NoHooks {
    fn after_step(&mut self, _: &AgentSpec, _: &DecodeTrace) -> Option<Injection> {
        None
    }
}

fn digest_vec(v: &[f64]) -> u64 {
    v.iter().fold(0x5EED_u64, |h, x| mix(h, x.to_bits()))
}

/// Running decoder state for one agent.
#[derive(Debug, Clone)]
pub struct SyntheticAgent {
    spec: AgentSpec,
    embedding: Matrix,
    recurrent: Matrix,
    hidden: Vec<f64>,
    context: Vec<f64>,
    step: usize,
}

impl SyntheticAgent {
    pub fn new(spec: AgentSpec) -> Result<Self, AgentError> {
        spec.validate()?;
        let mut rng = seed::rng(seed::derive(spec.seed, "agent/weights"));
        let embedding = seed::gaussian_matrix(&mut rng, spec.vocab_size, spec.d_model, 1.0);
        let recurrent = seed::gaussian_matrix(&mut rng, spec.d_model, spec.d_model, 0.5 / (spec.d_model as f64).sqrt());
        let d = spec.d_model;
        Ok(Self { spec, embedding, recurrent, hidden: vec![0.0; d], context: vec![0.0; d], step: 0 })
    }

    pub fn spec(&self) -> &AgentSpec {
        &self.spec
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    fn logits(&self, digest: u64) -> (Vec<f64>, u32) {
        let spec = &self.spec;
        let pick = splitmix64(digest ^ 0xD311_D311);
        let planted = if unit_f64(pick) < spec.delimiter_rate && spec.delimiter_count > 0 {
            (splitmix64(pick) % spec.delimiter_count as u64) as u32
        } else {
            let span = (spec.vocab_size - spec.delimiter_count) as u64;
            (spec.delimiter_count as u64 + splitmix64(pick) % span) as u32
        };
        let mut logits: Vec<f64> = (0..spec.vocab_size as u64)
            .map(|j| NOISE_AMPLITUDE * (2.0 * unit_f64(mix(digest, j)) - 1.0))
            .collect();
        logits[planted as usize] += PLANTED_MARGIN;
        (logits, planted)
    }

    /// Decodes one token and advances the hidden state.
    pub fn decode_step(&mut self) -> StepOutput {
        let digest = mix(mix(self.spec.seed, self.step as u64), digest_vec(&self.hidden) ^ digest_vec(&self.context).rotate_left(17));
        let (logits, planted) = self.logits(digest);
        let temperature = self.spec.temperature_at(self.step);
        let probs = softmax(&logits, temperature).expect("logits are finite and temperature positive");
        let h = entropy(&probs);
        let token = planted;

        let emb = self.embedding.row(token as usize);
        let mut next = vec![0.0; self.spec.d_model];
        for (i, n) in next.iter_mut().enumerate() {
            let rec: f64 = self.recurrent.row(i).iter().zip(&self.hidden).map(|(a, b)| a * b).sum();
            *n = (emb[i] + rec + self.context[i]).tanh();
        }
        self.hidden = next.clone();
        self.step += 1;
        StepOutput { token, logits, entropy: h, hidden: next }
    }

    /// Folds an injected memory into the decoding context.
    pub fn inject(&mut self, memory: &Matrix) -> Result<(), AgentError> {
        if memory.cols() != self.spec.d_model || memory.rows() == 0 {
            return Err(AgentError::InvalidInput(format!(
                "memory {:?} for d_model {}",
                memory.shape(),
                self.spec.d_model
            )));
        }
        let pooled = memory.mean_rows();
        for (c, m) in self.context.iter_mut().zip(pooled) {
            *c = (*c + m).tanh();
        }
        Ok(())
    }
}

/// Token counts handed to an agent at the start of its turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TurnInputs {
    pub prompt_tokens: u64,
    pub visual_tokens: u64,
    pub instruction_tokens: u64,
    /// Charged to the instruction column for every injection event.
    pub tokens_per_injection: u64,
}

/// Runs a full agent turn of `spec.output_len` steps.
pub fn run_turn(spec: &AgentSpec, inputs: TurnInputs, hooks: &mut dyn DecodeHooks) -> Result<DecodeTrace, AgentError> {
    let mut agent = SyntheticAgent::new(spec.clone())?;
    let mut trace = DecodeTrace { steps: Vec::with_capacity(spec.output_len), ledger: TokenBreakdown::default() };
    let mut injections = 0u64;
    for _ in 0..spec.output_len {
        let out = agent.decode_step();
        trace.steps.push(DecodeStep { token: out.token, entropy: out.entropy, hidden: out.hidden, injected: None });
        if let Some(inj) = hooks.after_step(spec, &trace) {
            agent.inject(&inj.memory)?;
            let last = trace.steps.last_mut().expect("a step was just pushed");
            last.injected = Some(InjectionMark { kind: inj.kind, rows: inj.memory.rows() });
            injections += 1;
        }
    }
    trace.ledger = TokenBreakdown {
        prompt: inputs.prompt_tokens,
        visual: inputs.visual_tokens,
        instruction: inputs.instruction_tokens + injections * inputs.tokens_per_injection,
        output: spec.output_len as u64,
    };
    Ok(trace)
}
