//! Agent graphs, turn scheduling and the token ledger.
//!
//! Two execution modes share one scheduler. Baseline mode relays text:
//! each turn's instruction carries the payloads of every executed ancestor
//! reachable through in-edges. Latent mode relays only a fixed conclusion
//! per direct predecessor and lets the memory banks carry the rest.

mod graph;

pub use graph::{build_topology, TopologyGraph, TopologyKind, TopologySpec};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{run_turn, DecodeTrace, NoHooks, ProjectorParams, TurnInputs, VisionEncoder};
use crate::compressor::{CompressorSet, CompressorShape};
use crate::config::{Mode, RunConfig, SegmentMode};
use crate::error::Error;
use crate::memory::{segment_trajectory, synthesize_perception, MemoryBank, MemoryKind, SegmentRule};
use crate::numeric::Image;
use crate::orchestration::{GateParams, InjectionEvent, MemoryContext, Orchestrator};
use crate::seed::{self, mix, unit_f64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("invalid topology: {0}")]
    Invalid(String),
}

/// Per-turn token ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenBreakdown {
    pub prompt: u64,
    pub visual: u64,
    pub instruction: u64,
    pub output: u64,
}

impl TokenBreakdown {
    pub fn total(&self) -> u64 {
        self.prompt + self.visual + self.instruction + self.output
    }
}

impl std::ops::Add for TokenBreakdown {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            prompt: self.prompt + o.prompt,
            visual: self.visual + o.visual,
            instruction: self.instruction + o.instruction,
            output: self.output + o.output,
        }
    }
}

impl std::iter::Sum for TokenBreakdown {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// What a baseline agent forwards to its successors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelayMode {
    ConclusionOnly,
    Perception,
    Thinking,
    FullContent,
}

impl RelayMode {
    /// Tokens forwarded for one predecessor output of `output` tokens.
    pub fn payload(self, output: u64, conclusion: u64, perception_share: f64) -> u64 {
        let c = conclusion.min(output);
        let body = output - c;
        let perception = (perception_share * body as f64).round() as u64;
        match self {
            RelayMode::ConclusionOnly => c,
            RelayMode::Perception => c + perception,
            RelayMode::Thinking => c + (body - perception),
            RelayMode::FullContent => output,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub query_tokens: u64,
    pub image: Option<Image>,
}

impl Task {
    /// Query of `cfg.tokens.prompt` tokens plus a seeded smooth test image.
    pub fn synthetic(cfg: &RunConfig) -> Self {
        let t = &cfg.task;
        let image = t.image.then(|| {
            let s = seed::derive(cfg.seed, "image");
            let f: Vec<f64> = (0..3 * t.channels as u64).map(|j| 0.05 + 0.4 * unit_f64(mix(s, j))).collect();
            Image::from_fn(t.image_height, t.image_width, t.channels, |y, x, c| {
                0.5 + 0.5 * (f[3 * c] * y as f64 + f[3 * c + 1] * x as f64 + 6.0 * f[3 * c + 2]).sin()
            })
        });
        Self { query_tokens: cfg.tokens.prompt, image }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnRecord {
    /// 1-based position in the schedule.
    pub turn: usize,
    pub agent: usize,
    pub ledger: TokenBreakdown,
    pub trace: DecodeTrace,
    pub events: Vec<InjectionEvent>,
    pub triggers_fired: usize,
    pub chunks: usize,
    pub overflow_runs: usize,
    pub bank_size_perception: usize,
    pub bank_size_thinking: usize,
}

impl TurnRecord {
    pub fn injections(&self, kind: MemoryKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub mode: Mode,
    pub turns: Vec<TurnRecord>,
    pub perception: MemoryBank,
    pub thinking: MemoryBank,
}

/// Per-turn ledgers and their sum.
pub fn account_tokens(transcript: &Transcript) -> (Vec<TokenBreakdown>, TokenBreakdown) {
    let per: Vec<TokenBreakdown> = transcript.turns.iter().map(|t| t.ledger).collect();
    let total = per.iter().copied().sum();
    (per, total)
}

fn executed_preds(graph: &TopologyGraph, agent: usize, done: &[bool]) -> Vec<usize> {
    graph.predecessors(agent).filter(|&p| done[p]).collect()
}

pub fn execute_task_baseline(graph: &TopologyGraph, task: &Task, relay: RelayMode, cfg: &RunConfig) -> Result<Transcript, Error> {
    let n = graph.n_agents;
    let mut done = vec![false; n];
    let mut relayed: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    let mut outputs = vec![0u64; n];
    let mut turns = Vec::with_capacity(n);
    let visual = if task.image.is_some() { cfg.tokens.visual } else { 0 };
    for (t, agent) in graph.schedule(seed::derive(cfg.seed, "topology")).into_iter().enumerate() {
        let mut sources = BTreeSet::new();
        for p in executed_preds(graph, agent, &done) {
            sources.insert(p);
            sources.extend(relayed[p].iter().copied());
        }
        let instruction = sources.iter().map(|&q| relay.payload(outputs[q], cfg.tokens.conclusion, cfg.tokens.perception_share)).sum();
        let spec = cfg.agent_spec(agent);
        let inputs = TurnInputs { prompt_tokens: task.query_tokens, visual_tokens: visual, instruction_tokens: instruction, tokens_per_injection: 0 };
        let trace = run_turn(&spec, inputs, &mut NoHooks)?;
        outputs[agent] = trace.ledger.output;
        relayed[agent] = sources;
        done[agent] = true;
        turns.push(TurnRecord {
            turn: t + 1,
            agent,
            ledger: trace.ledger,
            trace,
            events: Vec::new(),
            triggers_fired: 0,
            chunks: 0,
            overflow_runs: 0,
            bank_size_perception: 0,
            bank_size_thinking: 0,
        });
    }
    Ok(Transcript { mode: relay_mode_to_mode(relay), turns, perception: MemoryBank::perception(), thinking: MemoryBank::thinking(cfg.memory.capacity) })
}

fn relay_mode_to_mode(r: RelayMode) -> Mode {
    match r {
        RelayMode::ConclusionOnly => Mode::ConclusionOnly,
        RelayMode::Perception => Mode::Perception,
        RelayMode::Thinking => Mode::Thinking,
        RelayMode::FullContent => Mode::FullContent,
    }
}

/// Memory-system components derived from the master seed.
#[derive(Debug, Clone, PartialEq)]
pub struct MemorySystem {
    pub compressors: CompressorSet,
    pub gate: GateParams,
    pub vision: VisionEncoder,
    pub projector: ProjectorParams,
}

impl MemorySystem {
    pub fn init(cfg: &RunConfig) -> Result<Self, Error> {
        let m = &cfg.memory;
        let d = cfg.agent.d_model;
        let compressors = CompressorSet::init(CompressorShape::new(d), m.merge_len, m.memory_len, cfg.seed);
        let mut gate = GateParams::init(d, seed::derive(cfg.seed, "gate"));
        gate.b_g = cfg.gate.bias;
        gate.tau0 = cfg.gate.tau0;
        gate.tau_min = cfg.gate.tau_min;
        gate.anneal_rate = cfg.gate.anneal_rate;
        let vision = VisionEncoder::new(m.granularity, m.patch_size, cfg.task.channels, cfg.agent.d_v, seed::derive(cfg.seed, "vision"))?;
        let projector = ProjectorParams::init(cfg.agent.d_v, d, seed::derive(cfg.seed, "projector"));
        Ok(Self { compressors, gate, vision, projector })
    }
}

pub fn execute_task_latent(graph: &TopologyGraph, task: &Task, cfg: &RunConfig) -> Result<Transcript, Error> {
    let sys = MemorySystem::init(cfg)?;
    let orch_cfg = cfg.orchestration();
    let mut perception = MemoryBank::perception();
    if let Some(img) = &task.image {
        for unit in synthesize_perception(img, &sys.vision, &sys.projector, &sys.compressors.key)? {
            perception.push(unit);
        }
    }
    let mut thinking = MemoryBank::thinking(cfg.memory.capacity);
    let n = graph.n_agents;
    let mut done = vec![false; n];
    let mut turns = Vec::with_capacity(n);
    for (t, agent) in graph.schedule(seed::derive(cfg.seed, "topology")).into_iter().enumerate() {
        let preds = executed_preds(graph, agent, &done).len() as u64;
        let visual = if t == 0 && task.image.is_some() { cfg.tokens.visual } else { 0 };
        let inputs = TurnInputs {
            prompt_tokens: task.query_tokens,
            visual_tokens: visual,
            instruction_tokens: preds * cfg.tokens.conclusion,
            tokens_per_injection: cfg.tokens.per_injection,
        };
        let spec = cfg.agent_spec(agent);
        let ctx = MemoryContext { perception: &mut perception, thinking: &mut thinking, compressors: &sys.compressors, gate: &sys.gate };
        let mut orch = Orchestrator::new(ctx, &orch_cfg);
        let trace = run_turn(&spec, inputs, &mut orch)?;
        if let Some(e) = orch.error.take() {
            return Err(e.into());
        }
        let (events, fired) = (std::mem::take(&mut orch.events), orch.fired);
        drop(orch);

        let rule = match cfg.memory.segment {
            SegmentMode::Sampled => SegmentRule::Sampled { seed: seed::derive(cfg.seed, &format!("segment/{}", t + 1)) },
            SegmentMode::Threshold => SegmentRule::Threshold(cfg.memory.segment_threshold),
        };
        let chunks = segment_trajectory(&trace, &spec, rule)?;
        let report = thinking.insert_thinking(&chunks, &sys.compressors)?;
        log::info!(
            "turn {} agent {agent}: {} injections, {} chunks, thinking bank {}",
            t + 1,
            events.len(),
            chunks.len(),
            thinking.len()
        );
        done[agent] = true;
        turns.push(TurnRecord {
            turn: t + 1,
            agent,
            ledger: trace.ledger,
            trace,
            events,
            triggers_fired: fired,
            chunks: chunks.len(),
            overflow_runs: report.overflow_runs,
            bank_size_perception: perception.len(),
            bank_size_thinking: thinking.len(),
        });
    }
    Ok(Transcript { mode: Mode::Latent, turns, perception, thinking })
}

/// Runs the configured mode end to end.
pub fn execute(cfg: &RunConfig, mode: Mode) -> Result<Transcript, Error> {
    let graph = build_topology(&cfg.topology_spec(), seed::derive(cfg.seed, "topology"))?;
    let task = Task::synthetic(cfg);
    let transcript = match mode.relay() {
        None => execute_task_latent(&graph, &task, cfg)?,
        Some(relay) => execute_task_baseline(&graph, &task, relay, cfg)?,
    };
    transcript.check_invariants(cfg)?;
    Ok(transcript)
}

impl Transcript {
    /// Runtime checks applied to every finished run.
    pub fn check_invariants(&self, cfg: &RunConfig) -> Result<(), Error> {
        let fail = |m: String| Err(Error::Invariant(m));
        if self.turns.len() != cfg.topology.n_agents {
            return fail(format!("{} turns for {} agents", self.turns.len(), cfg.topology.n_agents));
        }
        if self.thinking.len() > cfg.memory.capacity {
            return fail(format!("thinking bank holds {} units, capacity {}", self.thinking.len(), cfg.memory.capacity));
        }
        let ln_v = (cfg.agent.vocab_size as f64).ln();
        let w = cfg.memory.window;
        for turn in &self.turns {
            if turn.trace.steps.iter().any(|s| !(0.0..=ln_v + 1e-12).contains(&s.entropy)) {
                return fail(format!("turn {}: entropy outside [0, ln |V|]", turn.turn));
            }
            if turn.events.iter().any(|e| e.memory.rows() != cfg.memory.memory_len) {
                return fail(format!("turn {}: injected memory length differs from {}", turn.turn, cfg.memory.memory_len));
            }
            let steps = turn.trace.injection_steps();
            if steps.first().is_some_and(|&s| s + 1 < 2 * w) || steps.windows(2).any(|p| p[1] - p[0] < w) {
                return fail(format!("turn {}: injections {steps:?} violate the spacing rule", turn.turn));
            }
            if turn.bank_size_thinking > cfg.memory.capacity {
                return fail(format!("turn {}: thinking bank over capacity", turn.turn));
            }
        }
        Ok(())
    }
}
