//! Entropy-triggered retrieval and latent injection.
//!
//! A trigger at step `i` requires the mean entropy over the last `2W`
//! steps to strictly exceed `μ + λσ` of the last `W` steps, and at least
//! `W` steps since the previous trigger. A fired trigger is attributed to
//! the `W`-step hidden window, routed by the gate to one bank, answered
//! with the top-k units, refined to `L` rows and injected.

mod gate;

pub use gate::{anneal, gate_logit, gate_logit_grad_w, gumbel_sigmoid, gumbel_sigmoid_from_uniform, gumbel_sigmoid_grad, route, GateParams, RouteMapping};

use serde::{Deserialize, Serialize};

use crate::agent::{AgentSpec, DecodeHooks, DecodeTrace, Injection};
use crate::compressor::{compress, refine_values, CompressorParams, CompressorSet};
use crate::memory::{MemoryBank, MemoryError, MemoryKind};
use crate::numeric::{cosine_sim, sigmoid, Matrix};

/// Population mean and standard deviation of the `w` entropies ending at `i`.
pub fn window_stats(entropies: &[f64], i: usize, w: usize) -> Option<(f64, f64)> {
    if w == 0 || i >= entropies.len() || i + 1 < w {
        return None;
    }
    let win = &entropies[i + 1 - w..=i];
    let mean = win.iter().sum::<f64>() / w as f64;
    let var = win.iter().map(|h| (h - mean) * (h - mean)).sum::<f64>() / w as f64;
    Some((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerState {
    pub window: usize,
    pub lambda: f64,
    /// Step of the previous trigger; starts at `-W`.
    pub last: i64,
}

impl TriggerState {
    pub fn new(window: usize, lambda: f64) -> Self {
        Self { window, lambda, last: -(window as i64) }
    }

    pub fn fire(&mut self, i: usize) {
        self.last = i as i64;
    }
}

pub fn should_trigger(entropies: &[f64], i: usize, state: &TriggerState) -> bool {
    let w = state.window;
    if (i as i64) - state.last < w as i64 {
        return false;
    }
    let (Some((mu, sigma)), Some((smooth, _))) = (window_stats(entropies, i, w), window_stats(entropies, i, 2 * w)) else {
        return false;
    };
    smooth > mu + state.lambda * sigma
}

/// Query for the `w` hidden states ending at step `i`.
pub fn attribute_window(trace: &DecodeTrace, i: usize, w: usize, key: &CompressorParams) -> Result<Vec<f64>, MemoryError> {
    if i >= trace.len() || i + 1 < w || w == 0 {
        return Err(MemoryError::EmptyValue);
    }
    Ok(compress(&trace.hidden_rows(i + 1 - w, i + 1), key)?.row(0).to_vec())
}

/// Indices of the `k` keys most similar to `query`, best first, ties to the lower index.
pub fn retrieve_topk(bank: &MemoryBank, query: &[f64], k: usize) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = bank.keys().map(|key| cosine_sim(query, key)).enumerate().collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored.into_iter().map(|(i, _)| i).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrchestrationConfig {
    pub window: usize,
    pub lambda: f64,
    pub top_k: usize,
    pub route_threshold: f64,
    pub route_mapping: RouteMapping,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectionEvent {
    pub step: usize,
    pub kind: MemoryKind,
    pub retrieved: Vec<usize>,
    pub memory: Matrix,
}

/// Everything a trigger reads from or writes to.
pub struct MemoryContext<'a> {
    pub perception: &'a mut MemoryBank,
    pub thinking: &'a mut MemoryBank,
    pub compressors: &'a CompressorSet,
    pub gate: &'a GateParams,
}

/// Attribution, routing, retrieval and refinement for a trigger at step `i`.
pub fn execute_trigger(
    trace: &DecodeTrace,
    i: usize,
    ctx: &mut MemoryContext<'_>,
    cfg: &OrchestrationConfig,
) -> Result<Option<InjectionEvent>, MemoryError> {
    let query = attribute_window(trace, i, cfg.window, &ctx.compressors.key)?;
    let window = trace.hidden_rows(i + 1 - cfg.window, i + 1);
    let p = sigmoid(gate_logit(&window, ctx.gate).map_err(|e| MemoryError::Geometry(e.to_string()))?);
    let kind = route(p, cfg.route_threshold, cfg.route_mapping);
    let bank = match kind {
        MemoryKind::Perception => &mut *ctx.perception,
        MemoryKind::Thinking => &mut *ctx.thinking,
    };
    if bank.is_empty() {
        log::debug!("step {i}: {} bank empty, injection skipped", kind.as_str());
        return Ok(None);
    }
    let retrieved = retrieve_topk(bank, &query, cfg.top_k);
    bank.record_trigger(&retrieved)?;
    let values: Vec<&Matrix> = retrieved.iter().map(|&r| &bank.units()[r].value).collect();
    let memory = refine_values(&values, &ctx.compressors.refine)?;
    Ok(Some(InjectionEvent { step: i, kind, retrieved, memory }))
}

/// Decode hooks that run the trigger workflow live during a turn.
pub struct Orchestrator<'a> {
    ctx: MemoryContext<'a>,
    cfg: &'a OrchestrationConfig,
    state: TriggerState,
    entropies: Vec<f64>,
    pub events: Vec<InjectionEvent>,
    /// Triggers that fired, including those with no injection.
    pub fired: usize,
    pub error: Option<MemoryError>,
}

impl<'a> Orchestrator<'a> {
    pub fn new(ctx: MemoryContext<'a>, cfg: &'a OrchestrationConfig) -> Self {
        Self { ctx, cfg, state: TriggerState::new(cfg.window, cfg.lambda), entropies: Vec::new(), events: Vec::new(), fired: 0, error: None }
    }
}

impl DecodeHooks for Orchestrator<'_> {
    fn after_step(&mut self, _spec: &AgentSpec, trace: &DecodeTrace) -> Option<Injection> {
        let i = trace.len() - 1;
        self.entropies.push(trace.steps[i].entropy);
        if self.error.is_some() || !should_trigger(&self.entropies, i, &self.state) {
            return None;
        }
        self.state.fire(i);
        self.fired += 1;
        match execute_trigger(trace, i, &mut self.ctx, self.cfg) {
            Ok(Some(ev)) => {
                let inj = Injection { kind: ev.kind, retrieved: ev.retrieved.clone(), memory: ev.memory.clone() };
                self.events.push(ev);
                Some(inj)
            }
            Ok(None) => None,
            Err(e) => {
                self.error = Some(e);
                None
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{run_turn, Phase, TurnInputs};
    use crate::compressor::{CompressorKind, CompressorShape, LayerParams};
    use crate::memory::MemoryUnit;
    use crate::seed;
    use proptest::prelude::*;

    #[test]
    fn stats_cases() {
        assert_eq!(window_stats(&[2.0; 20], 19, 16), Some((2.0, 0.0)));
        assert_eq!(window_stats(&[1.0, 3.0], 1, 2), Some((2.0, 1.0)));
        assert_eq!(window_stats(&[1.0; 10], 5, 16), None);
    }

    #[test]
    fn trigger_cases() {
        let st = TriggerState::new(16, 0.5);
        let flat = vec![1.5; 200];
        assert!((0..200).all(|i| !should_trigger(&flat, i, &st)));

        let st = TriggerState::new(4, 0.5);
        let mut seq = vec![3.0; 4];
        seq.extend([1.0; 4]);
        assert!(should_trigger(&seq, 7, &st));
        assert!(!should_trigger(&seq, 6, &st), "2W history needed");

        let mut st = TriggerState::new(4, 0.5);
        let mut seq = vec![3.0; 4];
        seq.extend([1.0; 12]);
        st.fire(7);
        assert!((8..11).all(|i| !should_trigger(&seq, i, &st)));
    }

    #[test]
    fn topk_cases() {
        let mut b = MemoryBank::thinking(50);
        for k in [vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]] {
            b.push(MemoryUnit { key: k, value: Matrix::zeros(1, 2), kind: MemoryKind::Thinking, inserted_at: 0, hit_count: 0 });
        }
        assert_eq!(retrieve_topk(&b, &[1.0, 0.1], 5), vec![0, 2, 1]);
        assert_eq!(retrieve_topk(&b, &[0.0, 1.0], 1), vec![1]);
        assert!(retrieve_topk(&MemoryBank::perception(), &[1.0], 5).is_empty());
    }

    fn brute_topk(keys: &[Vec<f64>], q: &[f64], k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..keys.len()).collect();
        // selection by repeated maximum scan
        let mut out = Vec::new();
        while out.len() < k && !idx.is_empty() {
            let mut best = 0;
            for j in 1..idx.len() {
                if cosine_sim(q, &keys[idx[j]]) > cosine_sim(q, &keys[idx[best]]) {
                    best = j;
                }
            }
            out.push(idx.remove(best));
        }
        out
    }

    proptest! {
        #[test]
        fn prop_topk_matches_brute_force(keys in prop::collection::vec(prop::collection::vec(-3i8..4, 3), 1..50), q in prop::collection::vec(-3i8..4, 3), k in 1usize..8) {
            let keys: Vec<Vec<f64>> = keys.iter().map(|k| k.iter().map(|&v| v as f64).collect()).collect();
            let q: Vec<f64> = q.iter().map(|&v| v as f64).collect();
            let mut b = MemoryBank::thinking(64);
            for key in &keys {
                b.push(MemoryUnit { key: key.clone(), value: Matrix::zeros(1, 3), kind: MemoryKind::Thinking, inserted_at: 0, hit_count: 0 });
            }
            prop_assert_eq!(retrieve_topk(&b, &q, k), brute_topk(&keys, &q, k));
        }

        #[test]
        fn prop_window_stats_match_definition(v in prop::collection::vec(0.0f64..7.0, 2..60), w in 1usize..20) {
            let i = v.len() - 1;
            match window_stats(&v, i, w) {
                None => prop_assert!(w > v.len()),
                Some((m, s)) => {
                    prop_assert!(s >= 0.0);
                    let win = &v[v.len() - w..];
                    prop_assert!(win.iter().cloned().fold(f64::INFINITY, f64::min) <= m + 1e-12);
                    prop_assert!(win.iter().cloned().fold(f64::NEG_INFINITY, f64::max) >= m - 1e-12);
                }
            }
        }
    }

    #[test]
    fn attribution_shapes_and_uniform_attention() {
        let d = 8;
        let mut key = CompressorParams::init(CompressorKind::Key, CompressorShape::new(d), 1, 4);
        let spec = AgentSpec {
            seed: 2,
            vocab_size: 64,
            d_model: d,
            d_v: d,
            output_len: 40,
            entropy_profile: vec![Phase::new(5, 1.0)],
            delimiter_count: 4,
            delimiter_rate: 0.25,
        };
        let trace = run_turn(&spec, TurnInputs::default(), &mut crate::agent::NoHooks).unwrap();
        let q = attribute_window(&trace, 20, 16, &key).unwrap();
        assert_eq!(q.len(), d);
        assert_ne!(q, attribute_window(&trace, 30, 16, &key).unwrap());
        assert!(attribute_window(&trace, 10, 16, &key).is_err());

        for l in &mut key.layers {
            *l = LayerParams { wv: l.wv.clone(), ..LayerParams::zeroed(d, 4 * d) };
        }
        let mut reversed = trace.clone();
        reversed.steps[5..21].reverse();
        let a = attribute_window(&trace, 20, 16, &key).unwrap();
        let b = attribute_window(&reversed, 20, 16, &key).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    fn populated(kind: MemoryKind, n: usize, d: usize, cs: &CompressorSet) -> MemoryBank {
        let mut b = if kind == MemoryKind::Thinking { MemoryBank::thinking(50) } else { MemoryBank::perception() };
        let mut r = seed::rng(n as u64);
        for i in 0..n {
            b.push(MemoryUnit::new(kind, seed::gaussian_matrix(&mut r, 3 + i % 5, d, 1.0), &cs.key).unwrap());
        }
        b
    }

    #[test]
    fn trigger_workflow_produces_refined_memory() {
        let d = 8;
        let cs = CompressorSet::init(CompressorShape::new(d), 8, 8, 1);
        let mut perception = MemoryBank::perception();
        let mut thinking = populated(MemoryKind::Thinking, 7, d, &cs);
        let mut gate = GateParams::init(d, 3);
        gate.w_g = vec![0.0; d];
        gate.b_g = 10.0;
        let spec = AgentSpec {
            seed: 2,
            vocab_size: 64,
            d_model: d,
            d_v: d,
            output_len: 40,
            entropy_profile: vec![Phase::new(5, 1.0)],
            delimiter_count: 4,
            delimiter_rate: 0.25,
        };
        let trace = run_turn(&spec, TurnInputs::default(), &mut crate::agent::NoHooks).unwrap();
        let cfg = OrchestrationConfig { window: 16, lambda: 0.5, top_k: 5, route_threshold: 0.5, route_mapping: RouteMapping::HighIsThinking };
        let mut ctx = MemoryContext { perception: &mut perception, thinking: &mut thinking, compressors: &cs, gate: &gate };
        let ev = execute_trigger(&trace, 31, &mut ctx, &cfg).unwrap().unwrap();
        assert_eq!(ev.kind, MemoryKind::Thinking);
        assert_eq!(ev.retrieved.len(), 5);
        assert_eq!(ev.memory.shape(), (8, d));
        assert_eq!(ctx.thinking.global_trigger_count(), 1);
        assert_eq!(ctx.thinking.units().iter().map(|u| u.hit_count).sum::<u64>(), 5);

        gate.b_g = -10.0;
        let mut ctx = MemoryContext { perception: &mut perception, thinking: &mut thinking, compressors: &cs, gate: &gate };
        assert!(execute_trigger(&trace, 31, &mut ctx, &cfg).unwrap().is_none());
    }

    #[test]
    fn live_hooks_respect_spacing() {
        let d = 8;
        let cs = CompressorSet::init(CompressorShape::new(d), 8, 8, 1);
        let mut perception = populated(MemoryKind::Perception, 4, d, &cs);
        let mut thinking = populated(MemoryKind::Thinking, 6, d, &cs);
        let gate = GateParams::init(d, 3);
        let cfg = OrchestrationConfig { window: 16, lambda: 0.5, top_k: 5, route_threshold: 0.5, route_mapping: RouteMapping::HighIsThinking };
        let spec = AgentSpec {
            seed: 9,
            vocab_size: 256,
            d_model: d,
            d_v: d,
            output_len: 300,
            entropy_profile: vec![Phase::new(40, 1e-3), Phase::new(6, 3.0)],
            delimiter_count: 16,
            delimiter_rate: 0.25,
        };
        let mut orch = Orchestrator::new(MemoryContext { perception: &mut perception, thinking: &mut thinking, compressors: &cs, gate: &gate }, &cfg);
        let trace = run_turn(&spec, TurnInputs::default(), &mut orch).unwrap();
        assert!(orch.error.is_none());
        let steps = trace.injection_steps();
        assert!(!steps.is_empty());
        assert!(steps[0] >= 31);
        assert!(steps.windows(2).all(|w| w[1] - w[0] >= 16));
        assert!(trace.steps.iter().filter_map(|s| s.injected).all(|m| m.rows == 8));
        assert_eq!(steps, orch.events.iter().map(|e| e.step).collect::<Vec<_>>());
    }
}
