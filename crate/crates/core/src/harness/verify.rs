//! Self-check suites behind the `verify` subcommand.
//!
//! Each suite returns `Ok(detail)` or `Err(failing property)`. Suites are
//! independent and run on the [`Execution`] pool; the report keeps the
//! declaration order.

use std::time::Instant;

use rand::Rng;

use crate::agent::{run_turn, AgentSpec, Phase, TurnInputs};
use crate::compressor::{build_mask, compress, compress_backward, compress_traced_with_mask, CompressorKind, CompressorParams, CompressorSet, CompressorShape};
use crate::config::{Mode, RunConfig};
use crate::harness::{csv_bytes, jsonl_bytes, run_mode, snapshot, TraceEvent, CSV_COLUMNS};
use crate::memory::{boundary_prob, Chunk, MemoryBank, MemoryKind, MemoryUnit};
use crate::numeric::{cosine_sim, entropy, finite_diff_grad, masked_attention, relative_error, softmax, Matrix, MASK_CONSTANT};
use crate::orchestration::{
    anneal, gate_logit, gate_logit_grad_w, gumbel_sigmoid_from_uniform, gumbel_sigmoid_grad, retrieve_topk, should_trigger, GateParams, MemoryContext,
    OrchestrationConfig, Orchestrator, RouteMapping, TriggerState,
};
use crate::par::Execution;
use crate::seed;
use crate::topology::{account_tokens, build_topology, execute, TopologyKind, TopologySpec};

/// Knobs for fault injection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    /// Magnitude of the content-to-target mask used by the mask suite.
    pub mask_constant: f64,
    pub exec: Execution,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { mask_constant: MASK_CONSTANT, exec: Execution::auto() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub outcome: Result<String, String>,
    pub millis: u128,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.outcome.is_ok()
    }

    /// `PASS name: detail` or `FAIL name: property`, without timing so
    /// repeated reports compare equal.
    pub fn line(&self) -> String {
        match &self.outcome {
            Ok(d) => format!("PASS {}: {d}", self.name),
            Err(e) => format!("FAIL {}: {e}", self.name),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SuiteResult> {
        self.suites.iter().filter(|s| !s.passed())
    }
}

type Outcome = Result<String, String>;
type Suite = fn(&VerifyOptions) -> Outcome;

pub const SUITES: [(&str, Suite); 15] = [
    ("softmax_entropy", softmax_entropy),
    ("mask", mask),
    ("attention_oracle", attention_oracle),
    ("compressor_gradients", compressor_gradients),
    ("gate_gradients", gate_gradients),
    ("equation_cases", equation_cases),
    ("topk_oracle", topk_oracle),
    ("capacity", capacity),
    ("trigger_spacing", trigger_spacing),
    ("topology_structure", topology_structure),
    ("token_accounting", token_accounting),
    ("latent_linearity", latent_linearity),
    ("snapshot_roundtrip", snapshot_roundtrip),
    ("output_schema", output_schema),
    ("determinism", determinism),
];

pub fn suite_names() -> Vec<&'static str> {
    SUITES.iter().map(|s| s.0).collect()
}

/// Runs the named suites, or all of them when `only` is empty.
pub fn run_suites(opts: &VerifyOptions, only: &[&str]) -> VerifyReport {
    let selected: Vec<(&'static str, Suite)> = SUITES.iter().copied().filter(|(n, _)| only.is_empty() || only.contains(n)).collect();
    let suites = opts.exec.map(&selected, |&(name, f)| {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(|| f(opts)).unwrap_or_else(|_| Err("suite panicked".into()));
        SuiteResult { name, outcome, millis: start.elapsed().as_millis() }
    });
    VerifyReport { suites }
}

pub fn run_all(opts: &VerifyOptions) -> VerifyReport {
    run_suites(opts, &[])
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn softmax_entropy(_: &VerifyOptions) -> Outcome {
    let mut rng = seed::rng(seed::derive(0, "verify/softmax"));
    for case in 0..500 {
        let n = rng.random_range(2..64);
        let t = rng.random_range(0.05..5.0);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
        let p = softmax(&logits, t).map_err(|e| e.to_string())?;
        let s: f64 = p.iter().sum();
        ensure((s - 1.0).abs() < 1e-12 && p.iter().all(|&x| x >= 0.0), || format!("case {case}: softmax sums to {s}"))?;
        let h = entropy(&p);
        ensure((0.0..=(n as f64).ln()).contains(&h), || format!("case {case}: entropy {h} outside [0, ln {n}]"))?;
    }
    let uniform = vec![1.0 / 1024.0; 1024];
    ensure((entropy(&uniform) - 1024f64.ln()).abs() < 1e-12, || "uniform entropy differs from ln |V|".into())?;
    let mut one_hot = vec![0.0; 16];
    one_hot[3] = 1.0;
    ensure(entropy(&one_hot) == 0.0, || "one-hot entropy is not zero".into())?;
    Ok("500 fuzzed distributions".into())
}

/// Mask cell count plus exact isolation of content rows from target rows.
fn mask(opts: &VerifyOptions) -> Outcome {
    let c = opts.mask_constant;
    for (x, y) in [(1, 1), (4, 2), (7, 8), (16, 1)] {
        let m = build_mask(x, y, c);
        let cells = m.as_slice().iter().filter(|&&v| v != 0.0).count();
        ensure(c == 0.0 || cells == x * y, || format!("mask {x}x{y}: {cells} masked cells"))?;
        ensure(m.sum() == -c * (x * y) as f64, || format!("mask {x}x{y}: sum {} != -C*x*y", m.sum()))?;
    }
    let mut checked = 0;
    for trial in 0..20u64 {
        let d = 8;
        let (x, y) = (2 + (trial % 6) as usize, 1 + (trial % 4) as usize);
        let params = CompressorParams::init(CompressorKind::Refine, CompressorShape::new(d), y, seed::derive(trial, "verify/mask"));
        let mut rng = seed::rng(trial);
        let seq = seed::gaussian_matrix(&mut rng, x, d, 1.0);
        let base = compress_traced_with_mask(&seq, &params, c).map_err(|e| e.to_string())?;
        let mut perturbed = params.clone();
        perturbed.target_tokens = perturbed.target_tokens.add(&seed::gaussian_matrix(&mut rng, y, d, 3.0)).map_err(|e| e.to_string())?;
        let other = compress_traced_with_mask(&seq, &perturbed, c).map_err(|e| e.to_string())?;
        for (layer, (a, b)) in base.iter().zip(&other).enumerate() {
            let diff = a.slice_rows(0, x).max_abs_diff(&b.slice_rows(0, x));
            ensure(diff == 0.0, || format!("information flow: target perturbation moved content rows by {diff:e} at layer {layer}"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} layer representations isolated"))
}

fn scalar_attention(z: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix, mask: &Matrix) -> Matrix {
    let (n, d) = z.shape();
    let dk = wq.cols();
    let proj = |w: &Matrix| Matrix::from_fn(n, w.cols(), |i, j| (0..d).map(|t| z.get(i, t) * w.get(t, j)).sum());
    let (q, k, v) = (proj(wq), proj(wk), proj(wv));
    let mut out = Matrix::zeros(n, wv.cols());
    for i in 0..n {
        let scores: Vec<f64> = (0..n).map(|j| (0..dk).map(|t| q.get(i, t) * k.get(j, t)).sum::<f64>() / (dk as f64).sqrt() + mask.get(i, j)).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z_sum: f64 = e.iter().sum();
        for j in 0..wv.cols() {
            out.set(i, j, (0..n).map(|t| e[t] / z_sum * v.get(t, j)).sum());
        }
    }
    out
}

fn attention_oracle(_: &VerifyOptions) -> Outcome {
    let mut cases = 0;
    for n in 3..=8 {
        for d in 3..=8 {
            let mut rng = seed::rng(seed::mix(n as u64, d as u64));
            let z = seed::gaussian_matrix(&mut rng, n, d, 1.0);
            let w: Vec<Matrix> = (0..3).map(|_| seed::gaussian_matrix(&mut rng, d, d, 0.5)).collect();
            let x = rng.random_range(1..n);
            let mask = build_mask(x, n - x, MASK_CONSTANT);
            let fast = masked_attention(&z, &w[0], &w[1], &w[2], &mask).map_err(|e| e.to_string())?;
            let slow = scalar_attention(&z, &w[0], &w[1], &w[2], &mask);
            let diff = fast.max_abs_diff(&slow);
            ensure(diff < 1e-9, || format!("{n}x{d}: max deviation {diff:e}"))?;
            cases += 1;
        }
    }
    Ok(format!("{cases} instances within 1e-9"))
}

fn compressor_gradients(_: &VerifyOptions) -> Outcome {
    let (d, x, y) = (8, 4, 2);
    let mut worst = 0.0f64;
    for trial in 0..3u64 {
        let p = CompressorParams::init(CompressorKind::Refine, CompressorShape::new(d), y, 50 + trial);
        let seq = seed::gaussian_matrix(&mut seed::rng(60 + trial), x, d, 1.0);
        let d_out = Matrix::from_fn(y, d, |i, j| ((i * d + j) as f64 * 0.37).sin());
        let loss = |s: &Matrix, q: &CompressorParams| {
            let out = compress(s, q).unwrap();
            out.as_slice().iter().zip(d_out.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = compress_backward(&seq, &p, &d_out).map_err(|e| e.to_string())?;
        let fd = finite_diff_grad(|f| loss(&Matrix::from_vec(x, d, f.to_vec()).unwrap(), &p), seq.as_slice(), 1e-5);
        let e1 = relative_error(g.seq.as_slice(), &fd);
        let fd_t = finite_diff_grad(
            |f| {
                let mut q = p.clone();
                q.target_tokens = Matrix::from_vec(y, d, f.to_vec()).unwrap();
                loss(&seq, &q)
            },
            p.target_tokens.as_slice(),
            1e-5,
        );
        let e2 = relative_error(g.target_tokens.as_slice(), &fd_t);
        worst = worst.max(e1).max(e2);
    }
    ensure(worst < 1e-4, || format!("compress gradient relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.2e}"))
}

fn gate_gradients(_: &VerifyOptions) -> Outcome {
    let mut worst = 0.0f64;
    for (a, tau, u) in [(0.3, 1.0, 0.4), (-1.2, 0.5, 0.8), (2.0, 2.0, 0.1), (0.0, 0.1, 0.5)] {
        let fd = finite_diff_grad(|v| gumbel_sigmoid_from_uniform(v[0], tau, u), &[a], 1e-6);
        worst = worst.max(relative_error(&[gumbel_sigmoid_grad(a, tau, u)], &fd));
    }
    let p = GateParams::init(8, 3);
    let window = Matrix::from_fn(16, 8, |i, j| ((i * 5 + j) as f64 * 0.21).cos());
    let fd = finite_diff_grad(|w| gate_logit(&window, &GateParams { w_g: w.to_vec(), ..p.clone() }).unwrap(), &p.w_g, 1e-5);
    worst = worst.max(relative_error(&gate_logit_grad_w(&window), &fd));
    ensure(worst < 1e-4, || format!("gate gradient relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.2e}"))
}

fn equation_cases(_: &VerifyOptions) -> Outcome {
    // boundary probabilities
    let ln_v = 1024f64.ln();
    ensure(boundary_prob(100, 3.0, 16, 1024) == 0.0, || "non-delimiter boundary probability is not 0".into())?;
    ensure((boundary_prob(3, 3.0, 16, 1024) - 3.0 / ln_v).abs() < 1e-15, || "delimiter boundary probability is not H/ln|V|".into())?;
    ensure(boundary_prob(3, 2.0 * ln_v, 16, 1024) == 1.0, || "boundary probability is not clipped to 1".into())?;

    // three-key similarity
    let key = CompressorParams::init(CompressorKind::Key, CompressorShape::new(2), 1, 0);
    let mut bank = MemoryBank::perception();
    for k in [vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]] {
        let mut u = MemoryUnit::new(MemoryKind::Perception, Matrix::zeros(1, 2), &key).map_err(|e| e.to_string())?;
        u.key = k;
        bank.push(u);
    }
    let s = bank.global_similarity(2).map_err(|e| e.to_string())?;
    ensure((s - 2f64.sqrt() / 2.0).abs() < 1e-9, || format!("three-key similarity {s}, expected sqrt(2)/2"))?;

    // trigger positive and negative cases
    let st = TriggerState::new(4, 0.5);
    let mut rising = vec![3.0; 4];
    rising.extend([1.0; 4]);
    ensure(should_trigger(&rising, 7, &st), || "cooling window did not trigger".into())?;
    ensure(!should_trigger(&[1.5; 40], 30, &st), || "flat entropy triggered".into())?;
    let mut spaced = TriggerState::new(4, 0.5);
    spaced.fire(7);
    let mut long = rising.clone();
    long.extend([1.0; 8]);
    ensure(!should_trigger(&long, 9, &spaced), || "trigger inside the spacing window".into())?;

    // annealing table
    let p = GateParams { w_g: vec![], b_g: 0.0, tau0: 2.0, tau_min: 0.1, anneal_rate: 0.9 };
    ensure(anneal(&p, 0) == 2.0 && (anneal(&p, 1) - 1.8).abs() < 1e-15 && anneal(&p, 1000) == 0.1, || "annealing table mismatch".into())?;
    Ok("boundary, similarity, trigger and annealing cases".into())
}

fn keyed_unit(key: Vec<f64>) -> MemoryUnit {
    MemoryUnit { value: Matrix::from_rows(std::slice::from_ref(&key)).unwrap(), key, kind: MemoryKind::Thinking, inserted_at: 0, hit_count: 0 }
}

fn topk_oracle(_: &VerifyOptions) -> Outcome {
    let mut rng = seed::rng(seed::derive(0, "verify/topk"));
    for case in 0..500 {
        let n = rng.random_range(0..40);
        let d = rng.random_range(1..6);
        let k = rng.random_range(0..8);
        // coarse grid so ties are frequent
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| (0..d).map(|_| rng.random_range(-2i32..=2) as f64).collect::<Vec<f64>>();
        let units: Vec<MemoryUnit> = (0..n).map(|_| keyed_unit(draw(&mut rng))).collect();
        let bank = MemoryBank::from_parts(MemoryKind::Thinking, Some(50), 0, units);
        let q = draw(&mut rng);
        let got = retrieve_topk(&bank, &q, k);
        let sims: Vec<f64> = bank.keys().map(|key| cosine_sim(&q, key)).collect();
        let mut brute: Vec<usize> = (0..n).collect();
        for i in 0..n {
            for j in 0..n - 1 - i {
                let (a, b) = (brute[j], brute[j + 1]);
                if sims[b] > sims[a] || (sims[b] == sims[a] && b < a) {
                    brute.swap(j, j + 1);
                }
            }
        }
        brute.truncate(k);
        ensure(got == brute, || format!("case {case}: top-{k} {got:?} != brute force {brute:?}"))?;
    }
    Ok("500 fuzzed bank states".into())
}

fn capacity(_: &VerifyOptions) -> Outcome {
    let d = 8;
    let cs = CompressorSet::init(CompressorShape::new(d), 8, 8, 17);
    let mut bank = MemoryBank::thinking(50);
    let mut rng = seed::rng(seed::derive(0, "verify/capacity"));
    let (mut inserted, mut runs) = (0, 0);
    while inserted < 10_000 {
        let chunks: Vec<Chunk> = (0..rng.random_range(1..6))
            .map(|_| {
                let len = rng.random_range(1..4);
                Chunk { start: 0, end: len, hidden: seed::gaussian_matrix(&mut rng, len, d, 1.0) }
            })
            .collect();
        let r = bank.insert_thinking(&chunks, &cs).map_err(|e| e.to_string())?;
        inserted += r.inserted;
        runs += r.overflow_runs;
        ensure(bank.len() <= 50, || format!("bank holds {} after {inserted} insertions", bank.len()))?;
        if !bank.is_empty() {
            let hits: Vec<usize> = (0..rng.random_range(1..=bank.len().min(5))).map(|i| (i * 7 + inserted) % bank.len()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
            bank.record_trigger(&hits).map_err(|e| e.to_string())?;
        }
        let before = bank.clone();
        let report = bank.manage_overflow(&cs).map_err(|e| e.to_string())?;
        if before.len() < 50 {
            ensure(!report.ran() && bank == before, || "manage_overflow changed a bank below capacity".into())?;
        }
        let settled = bank.clone();
        let again = bank.manage_overflow(&cs).map_err(|e| e.to_string())?;
        ensure(!again.ran() && bank == settled, || "manage_overflow is not idempotent on its output".into())?;
    }
    ensure(runs >= 100, || format!("overflow management ran only {runs} times"))?;
    Ok(format!("{inserted} insertions, {runs} overflow runs, final size {}", bank.len()))
}

fn fuzz_spec(rng: &mut rand_chacha::ChaCha8Rng, seed_: u64) -> AgentSpec {
    let phases: Vec<Phase> = (0..rng.random_range(1..6))
        .map(|_| if rng.random_bool(0.5) { Phase::new(rng.random_range(1..40), 1e-3) } else { Phase::new(rng.random_range(1..20), rng.random_range(0.3..4.0)) })
        .collect();
    AgentSpec {
        seed: seed_,
        vocab_size: 64,
        d_model: 8,
        d_v: 8,
        output_len: rng.random_range(32..300),
        entropy_profile: phases,
        delimiter_count: 4,
        delimiter_rate: 0.25,
    }
}

fn trigger_spacing(opts: &VerifyOptions) -> Outcome {
    let w = 16;
    let cfg = OrchestrationConfig { window: w, lambda: 0.5, top_k: 5, route_threshold: 0.5, route_mapping: RouteMapping::HighIsThinking };
    let cs = CompressorSet::init(CompressorShape::new(8), 8, 8, 5);
    let gate = GateParams::init(8, 6);
    let per = opts.exec.map_range(1000, |t| -> Result<usize, String> {
        let mut rng = seed::rng(seed::derive(t as u64, "verify/spacing"));
        let spec = fuzz_spec(&mut rng, t as u64);
        let mut perception = MemoryBank::perception();
        let mut thinking = MemoryBank::thinking(50);
        for _ in 0..3 {
            let v = seed::gaussian_matrix(&mut rng, 4, 8, 1.0);
            perception.push(MemoryUnit::new(MemoryKind::Perception, v.clone(), &cs.key).map_err(|e| e.to_string())?);
            thinking.push(MemoryUnit::new(MemoryKind::Thinking, v, &cs.key).map_err(|e| e.to_string())?);
        }
        let ctx = MemoryContext { perception: &mut perception, thinking: &mut thinking, compressors: &cs, gate: &gate };
        let mut orch = Orchestrator::new(ctx, &cfg);
        let trace = run_turn(&spec, TurnInputs::default(), &mut orch).map_err(|e| e.to_string())?;
        let steps = trace.injection_steps();
        ensure(steps.first().is_none_or(|&s| s + 1 >= 2 * w), || format!("trace {t}: trigger at step {} before 2W-1", steps[0]))?;
        ensure(steps.windows(2).all(|p| p[1] - p[0] >= w), || format!("trace {t}: injections {steps:?} closer than W"))?;
        Ok(steps.len())
    });
    let mut total = 0;
    for r in per {
        total += r?;
    }
    ensure(total > 0, || "no trace triggered; the fuzz profile is degenerate".into())?;
    Ok(format!("1000 traces, {total} injections"))
}

fn topology_structure(_: &VerifyOptions) -> Outcome {
    for n in 1..=12usize {
        for s in 0..5u64 {
            let g = |k| build_topology(&TopologySpec::new(k, n), s).map_err(|e| e.to_string());
            let lin = g(TopologyKind::Linear)?;
            ensure(lin.edges == (1..n).map(|i| (i - 1, i)).collect::<Vec<_>>(), || format!("linear n={n} is not a chain"))?;
            let comp = g(TopologyKind::Complete)?;
            ensure(comp.edges.len() == n * (n - 1), || format!("complete n={n} has {} edges", comp.edges.len()))?;
            let hub = g(TopologyKind::Centralized)?;
            ensure(n < 2 || (hub.out_degree(0) == n - 1 && hub.in_degree(0) == n - 1), || format!("centralized n={n} hub degree"))?;
            ensure((1..n).all(|v| hub.in_degree(v) == 1 && hub.out_degree(v) == 1), || format!("centralized n={n} spoke degree"))?;
            let rnd = g(TopologyKind::Random)?;
            ensure(rnd.is_acyclic(), || format!("random n={n} seed {s} has a cycle"))?;
            if n % 2 == 0 {
                let lay = g(TopologyKind::Layered)?;
                ensure(lay.is_acyclic() && lay.edges.len() == 4 * (n / 2 - 1), || format!("layered n={n} is not complete bipartite between layers"))?;
            }
            for graph in [&lin, &comp, &hub, &rnd] {
                let mut sched = graph.schedule(s);
                sched.sort_unstable();
                ensure(sched == (0..n).collect::<Vec<_>>(), || format!("{:?} n={n}: schedule is not a permutation", graph.kind))?;
            }
        }
    }
    Ok("5 kinds, n = 1..12".into())
}

fn small_cfg(n: usize, seed_: u64) -> RunConfig {
    let mut cfg = RunConfig { seed: seed_, ..RunConfig::default() };
    cfg.topology.n_agents = n;
    cfg.agent.d_model = 16;
    cfg.agent.d_v = 16;
    cfg
}

fn token_accounting(_: &VerifyOptions) -> Outcome {
    for n in 1..=10u64 {
        let cfg = small_cfg(n as usize, 0);
        let (p, v, o) = (cfg.tokens.prompt, cfg.tokens.visual, cfg.agent.output_len as u64);
        let (_, total) = account_tokens(&execute(&cfg, Mode::FullContent).map_err(|e| e.to_string())?);
        let closed = n * (p + v + o) + o * n * (n - 1) / 2;
        ensure(total.total() == closed, || format!("full_content n={n}: {} != closed form {closed}", total.total()))?;
        let by_mode: Vec<Vec<u64>> = [Mode::ConclusionOnly, Mode::Perception, Mode::FullContent]
            .iter()
            .map(|&m| execute(&cfg, m).map(|t| t.turns.iter().map(|x| x.ledger.total()).collect()).map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?;
        for (t, ((co, pe), fc)) in by_mode[0].iter().zip(&by_mode[1]).zip(&by_mode[2]).enumerate() {
            ensure(co <= pe && pe <= fc, || format!("n={n} turn {}: payload ordering violated", t + 1))?;
            ensure(t == 0 || co < pe, || format!("n={n} turn {}: conclusion-only not below perception", t + 1))?;
        }
    }
    Ok("closed form exact for n = 1..10".into())
}

fn latent_linearity(opts: &VerifyOptions) -> Outcome {
    let per_n = opts.exec.map_range(10, |i| -> Result<f64, String> {
        let n = i + 1;
        let t = execute(&small_cfg(n, 0), Mode::Latent).map_err(|e| e.to_string())?;
        Ok(account_tokens(&t).1.total() as f64 / n as f64)
    });
    let per_n: Vec<f64> = per_n.into_iter().collect::<Result<_, _>>()?;
    let (lo, hi) = per_n.iter().fold((f64::MAX, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
    ensure(hi <= 1.1 * lo, || format!("latent total(n)/n spans {lo:.1}..{hi:.1}"))?;
    Ok(format!("total(n)/n in {lo:.1}..{hi:.1}"))
}

fn snapshot_roundtrip(_: &VerifyOptions) -> Outcome {
    for s in 0..100u64 {
        let d = 4 + (s % 3) as usize * 4;
        let cs = CompressorSet::init(CompressorShape::new(d), 4, 4, s);
        let mut bank = MemoryBank::thinking(50);
        let mut rng = seed::rng(s);
        let chunks: Vec<Chunk> = (0..(s % 60) as usize)
            .map(|i| Chunk { start: 0, end: 1 + i % 3, hidden: seed::gaussian_matrix(&mut rng, 1 + i % 3, d, 1.0) })
            .collect();
        bank.insert_thinking(&chunks, &cs).map_err(|e| e.to_string())?;
        if !bank.is_empty() {
            bank.record_trigger(&[0]).map_err(|e| e.to_string())?;
        }
        let back = snapshot::bank_from_json(&snapshot::bank_to_json(&bank, d), Some(d)).map_err(|e| e.to_string())?;
        ensure(back == bank, || format!("seed {s}: bank differs after round trip"))?;
        let cs_back = snapshot::compressors_from_json(&snapshot::compressors_to_json(&cs), Some(d)).map_err(|e| e.to_string())?;
        ensure(cs_back == cs, || format!("seed {s}: compressors differ after round trip"))?;
        ensure(snapshot::bank_from_json(&snapshot::bank_to_json(&bank, d), Some(d + 1)).is_err(), || format!("seed {s}: wrong d_model accepted"))?;
    }
    Ok("100 seeds bit-identical".into())
}

/// Checks emitted CSV and JSONL against the documented schema.
pub fn check_schema(csv_text: &str, jsonl_text: &str) -> Result<(), String> {
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let header = reader.headers().map_err(|e| e.to_string())?.clone();
    ensure(header.iter().eq(CSV_COLUMNS), || format!("csv header {header:?}"))?;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        ensure(rec.len() == CSV_COLUMNS.len(), || format!("csv row {i}: {} fields", rec.len()))?;
        ensure(Mode::parse(&rec[1]).is_some(), || format!("csv row {i}: unknown mode {}", &rec[1]))?;
        let nums: Vec<u64> = (2..11).map(|c| rec[c].parse::<u64>()).collect::<Result<_, _>>().map_err(|e| format!("csv row {i}: {e}"))?;
        ensure(nums[5] == nums[1] + nums[2] + nums[3] + nums[4], || format!("csv row {i}: total is not the column sum"))?;
    }
    for (i, line) in jsonl_text.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| format!("jsonl line {}: {e}", i + 1))?;
        ensure(v.is_object() && v.get("run_id").is_some_and(|r| r.is_string()), || format!("jsonl line {}: missing run_id", i + 1))?;
        serde_json::from_value::<TraceEvent>(v).map_err(|e| format!("jsonl line {}: {e}", i + 1))?;
    }
    Ok(())
}

fn output_schema(_: &VerifyOptions) -> Outcome {
    let mut cfg = small_cfg(4, 3);
    cfg.output.steps = true;
    let mut lines = 0;
    for mode in Mode::ALL {
        let out = run_mode(&cfg, mode).map_err(|e| e.to_string())?;
        let csv_text = String::from_utf8(csv_bytes(&out.rows).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let jsonl = String::from_utf8(jsonl_bytes(&out.events)).map_err(|e| e.to_string())?;
        check_schema(&csv_text, &jsonl)?;
        lines += jsonl.lines().count();
    }
    Ok(format!("5 modes, {lines} trace lines valid"))
}

fn determinism(_: &VerifyOptions) -> Outcome {
    let cfg = RunConfig::default();
    let a = run_mode(&cfg, Mode::Latent).map_err(|e| e.to_string())?;
    let b = run_mode(&cfg, Mode::Latent).map_err(|e| e.to_string())?;
    ensure(jsonl_bytes(&a.events) == jsonl_bytes(&b.events), || "JSONL differs between identical runs".into())?;
    ensure(csv_bytes(&a.rows).ok() == csv_bytes(&b.rows).ok(), || "CSV differs between identical runs".into())?;
    ensure(a.transcript.thinking == b.transcript.thinking, || "thinking bank differs between identical runs".into())?;
    Ok(format!("default latent run reproduced, total {}", a.summary.total))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_mask_constant_fails_only_the_mask_suite() {
        let opts = VerifyOptions { mask_constant: 0.0, ..VerifyOptions::default() };
        let r = run_suites(&opts, &["mask", "attention_oracle"]);
        assert!(!r.suites[0].passed(), "{:?}", r.suites[0]);
        assert!(r.suites[0].line().contains("information flow"));
        assert!(r.suites[1].passed());
        assert!(run_suites(&VerifyOptions { mask_constant: 10.0, ..opts }, &["mask"]).suites[0].outcome.is_err());
    }

    #[test]
    fn schema_check_rejects_bad_rows() {
        let header = CSV_COLUMNS.join(",");
        assert!(check_schema(&format!("{header}\nx,latent,1,1,1,1,1,5,0,0,0\n"), "").is_err());
        assert!(check_schema(&format!("{header}\nx,latent,1,1,1,1,1,4,0,0,0\n"), "").is_ok());
        assert!(check_schema(&header, "{\"event\":\"bogus\",\"run_id\":\"x\"}").is_err());
    }
}
