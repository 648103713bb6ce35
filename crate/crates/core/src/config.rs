//! Run configuration.
//!
//! TOML by default, JSON when the file ends in `.json`. Every field has a
//! default, so an empty file is a valid configuration. See
//! `docs/formats.md` for the full schema.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{AgentSpec, Phase};
use crate::error::Error;
use crate::orchestration::{OrchestrationConfig, RouteMapping};
use crate::seed;
use crate::topology::{RelayMode, TopologyKind, TopologySpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Latent,
    ConclusionOnly,
    Perception,
    Thinking,
    FullContent,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::ConclusionOnly, Mode::Perception, Mode::Thinking, Mode::FullContent, Mode::Latent];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Latent => "latent",
            Mode::ConclusionOnly => "conclusion_only",
            Mode::Perception => "perception",
            Mode::Thinking => "thinking",
            Mode::FullContent => "full_content",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn relay(self) -> Option<RelayMode> {
        match self {
            Mode::Latent => None,
            Mode::ConclusionOnly => Some(RelayMode::ConclusionOnly),
            Mode::Perception => Some(RelayMode::Perception),
            Mode::Thinking => Some(RelayMode::Thinking),
            Mode::FullContent => Some(RelayMode::FullContent),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentMode {
    Sampled,
    Threshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    pub window: usize,
    pub lambda: f64,
    pub memory_len: usize,
    pub capacity: usize,
    pub granularity: usize,
    pub top_k: usize,
    pub merge_len: usize,
    pub patch_size: usize,
    pub route_threshold: f64,
    pub route_mapping: RouteMapping,
    pub segment: SegmentMode,
    pub segment_threshold: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            window: 16,
            lambda: 0.5,
            memory_len: 8,
            capacity: 50,
            granularity: 3,
            top_k: 5,
            merge_len: 8,
            patch_size: 4,
            route_threshold: 0.5,
            route_mapping: RouteMapping::HighIsThinking,
            segment: SegmentMode::Sampled,
            segment_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_v: usize,
    pub output_len: usize,
    pub delimiter_count: usize,
    pub delimiter_rate: f64,
    /// `[phase_len, temperature]` pairs, cycled over the turn.
    pub profile: Vec<(usize, f64)>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1024,
            d_model: 64,
            d_v: 64,
            output_len: 557,
            delimiter_count: 16,
            delimiter_rate: 0.25,
            profile: default_profile(),
        }
    }
}

/// Thirty cold/hot alternations followed by a 24-step cold gap.
///
/// Inside the alternating stretch the `W`-window statistics stay high, so
/// nothing fires while delimiters in the hot steps cut short chunks; each
/// cold gap produces exactly one trigger once the last hot step leaves the
/// `W` window.
pub fn default_profile() -> Vec<(usize, f64)> {
    let mut p = Vec::with_capacity(61);
    for _ in 0..30 {
        p.push((6, 1e-3));
        p.push((2, 2.0));
    }
    p.push((24, 1e-3));
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyConfig {
    pub kind: TopologyKind,
    pub n_agents: usize,
    pub layers: Vec<usize>,
    pub edge_prob: f64,
    pub edges: Vec<(usize, usize)>,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self { kind: TopologyKind::Linear, n_agents: 10, layers: Vec::new(), edge_prob: 0.3, edges: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenConfig {
    pub prompt: u64,
    pub visual: u64,
    pub conclusion: u64,
    pub per_injection: u64,
    /// Fraction of a non-conclusion output attributed to perception content.
    pub perception_share: f64,
}

impl Default for TokenConfig {
    fn default() -> Self {
        Self { prompt: 20, visual: 100, conclusion: 32, per_injection: 40, perception_share: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub bias: f64,
    pub tau0: f64,
    pub tau_min: f64,
    pub anneal_rate: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { bias: 0.0, tau0: 1.0, tau_min: 0.1, anneal_rate: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub image: bool,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { image: true, image_height: 64, image_width: 64, channels: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
    pub snapshot: bool,
    /// Emit one JSONL line per decode step.
    pub steps: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "out".into(), snapshot: true, steps: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub memory: MemoryConfig,
    pub agent: AgentConfig,
    pub topology: TopologyConfig,
    pub tokens: TokenConfig,
    pub gate: GateConfig,
    pub task: TaskConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::Latent,
            memory: MemoryConfig::default(),
            agent: AgentConfig::default(),
            topology: TopologyConfig::default(),
            tokens: TokenConfig::default(),
            gate: GateConfig::default(),
            task: TaskConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// A rejected field: `section.key` plus the reason.
struct Violation {
    section: &'static str,
    key: &'static str,
    message: String,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let raw = std::fs::read_to_string(path)?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::parse(&raw, json)
    }

    pub fn parse(raw: &str, json: bool) -> Result<Self, Error> {
        let cfg: RunConfig = if json {
            serde_json::from_str(raw).map_err(|e| Error::Config { line: Some(e.line()), message: e.to_string() })?
        } else {
            toml::from_str(raw).map_err(|e| Error::Config {
                line: e.span().map(|s| line_of_offset(raw, s.start)),
                message: e.message().to_string(),
            })?
        };
        if let Err(v) = cfg.check() {
            return Err(Error::Config {
                line: locate(raw, v.section, v.key, json),
                message: format!("{}.{}: {}", v.section, v.key, v.message),
            });
        }
        Ok(cfg)
    }

    /// Validation without source positions.
    pub fn validate(&self) -> Result<(), Error> {
        self.check().map_err(|v| Error::Config { line: None, message: format!("{}.{}: {}", v.section, v.key, v.message) })
    }

    fn check(&self) -> Result<(), Violation> {
        fn fail(section: &'static str, key: &'static str, message: impl Into<String>) -> Result<(), Violation> {
            Err(Violation { section, key, message: message.into() })
        }
        let m = &self.memory;
        if m.window < 2 {
            return fail("memory", "window", format!("must be at least 2, got {}", m.window));
        }
        if !(m.lambda >= 0.0 && m.lambda.is_finite()) {
            return fail("memory", "lambda", "must be a finite non-negative number");
        }
        if m.memory_len < 1 {
            return fail("memory", "memory_len", "must be at least 1");
        }
        if m.capacity < 5 {
            return fail("memory", "capacity", format!("must be at least 5, got {}", m.capacity));
        }
        if m.granularity < 1 {
            return fail("memory", "granularity", "must be at least 1");
        }
        if m.top_k < 1 {
            return fail("memory", "top_k", "must be at least 1");
        }
        if m.merge_len < 1 {
            return fail("memory", "merge_len", "must be at least 1");
        }
        if m.patch_size < 1 {
            return fail("memory", "patch_size", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&m.route_threshold) {
            return fail("memory", "route_threshold", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&m.segment_threshold) {
            return fail("memory", "segment_threshold", "must lie in [0, 1]");
        }
        let a = &self.agent;
        if a.vocab_size < 2 {
            return fail("agent", "vocab_size", "must be at least 2");
        }
        if a.d_model < 1 || a.d_v < 1 {
            return fail("agent", "d_model", "dimensions must be positive");
        }
        if a.output_len < 1 {
            return fail("agent", "output_len", "must be at least 1");
        }
        if a.delimiter_count >= a.vocab_size {
            return fail("agent", "delimiter_count", "must be smaller than vocab_size");
        }
        if !(0.0..=1.0).contains(&a.delimiter_rate) {
            return fail("agent", "delimiter_rate", "must lie in [0, 1]");
        }
        if a.profile.iter().all(|p| p.0 == 0) || a.profile.iter().any(|p| !(p.1 > 0.0 && p.1.is_finite())) {
            return fail("agent", "profile", "needs a positive total length and positive temperatures");
        }
        let t = &self.topology;
        if t.n_agents < 1 {
            return fail("topology", "n_agents", "must be at least 1");
        }
        if t.kind == TopologyKind::Layered && !t.layers.is_empty() && t.layers.iter().sum::<usize>() != t.n_agents {
            return fail("topology", "layers", "layer sizes must sum to n_agents");
        }
        if !(0.0..=1.0).contains(&t.edge_prob) {
            return fail("topology", "edge_prob", "must lie in [0, 1]");
        }
        if t.edges.iter().any(|&(x, y)| x == y || x >= t.n_agents || y >= t.n_agents) {
            return fail("topology", "edges", "edges must join distinct agents below n_agents");
        }
        if !(0.0..=1.0).contains(&self.tokens.perception_share) {
            return fail("tokens", "perception_share", "must lie in [0, 1]");
        }
        if self.tokens.prompt < 1 {
            return fail("tokens", "prompt", "must be at least 1");
        }
        let g = &self.gate;
        if !(g.tau_min > 0.0 && g.tau_min <= g.tau0) {
            return fail("gate", "tau_min", "must satisfy 0 < tau_min <= tau0");
        }
        if !(g.anneal_rate > 0.0 && g.anneal_rate < 1.0) {
            return fail("gate", "anneal_rate", "must lie in (0, 1)");
        }
        let task = &self.task;
        if task.image {
            let side = m.patch_size << m.granularity;
            if task.image_height == 0 || !task.image_height.is_multiple_of(side) {
                return fail("task", "image_height", format!("must be a positive multiple of the block side {side}"));
            }
            if task.image_width == 0 || !task.image_width.is_multiple_of(side) {
                return fail("task", "image_width", format!("must be a positive multiple of the block side {side}"));
            }
            if task.channels < 1 {
                return fail("task", "channels", "must be at least 1");
            }
        }
        Ok(())
    }

    pub fn agent_spec(&self, agent: usize) -> AgentSpec {
        let a = &self.agent;
        AgentSpec {
            seed: seed::derive(self.seed, &format!("agent/{agent}")),
            vocab_size: a.vocab_size,
            d_model: a.d_model,
            d_v: a.d_v,
            output_len: a.output_len,
            entropy_profile: a.profile.iter().map(|&(len, t)| Phase::new(len, t)).collect(),
            delimiter_count: a.delimiter_count,
            delimiter_rate: a.delimiter_rate,
        }
    }

    pub fn topology_spec(&self) -> TopologySpec {
        let t = &self.topology;
        TopologySpec { kind: t.kind, n_agents: t.n_agents, layers: t.layers.clone(), edge_prob: t.edge_prob, edges: t.edges.clone() }
    }

    pub fn orchestration(&self) -> OrchestrationConfig {
        let m = &self.memory;
        OrchestrationConfig {
            window: m.window,
            lambda: m.lambda,
            top_k: m.top_k,
            route_threshold: m.route_threshold,
            route_mapping: m.route_mapping,
        }
    }
}

fn line_of_offset(raw: &str, offset: usize) -> usize {
    raw[..offset.min(raw.len())].matches('\n').count() + 1
}

/// 1-based line of `key` inside `[section]` (TOML) or of `"key"` (JSON).
fn locate(raw: &str, section: &str, key: &str, json: bool) -> Option<usize> {
    if json {
        let needle = format!("\"{key}\"");
        return raw.lines().position(|l| l.contains(&needle)).map(|i| i + 1);
    }
    let mut current = String::new();
    for (i, line) in raw.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = name.trim().to_string();
            continue;
        }
        let Some((k, _)) = t.split_once('=') else { continue };
        let k = k.trim();
        if (current == section && k == key) || (current.is_empty() && k == format!("{section}.{key}")) {
            return Some(i + 1);
        }
    }
    None
}
