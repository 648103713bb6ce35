//! Run execution and artifact emission: JSONL traces, CSV summaries and
//! JSON snapshots. Output bytes depend only on the configuration.

pub mod snapshot;
pub mod verify;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::config::{Mode, RunConfig};
use crate::memory::MemoryKind;
use crate::par::Execution;
use crate::topology::{execute, MemorySystem, Transcript};
use crate::Error;

pub use snapshot::SnapshotError;

/// Version tag written into every JSONL `run_start` record.
pub const TRACE_VERSION: &str = "latmem-trace/1";

/// Fixed CSV header, in column order.
pub const CSV_COLUMNS: [&str; 11] = [
    "run_id",
    "mode",
    "turn",
    "prompt_tokens",
    "visual_tokens",
    "instruction_tokens",
    "output_tokens",
    "total",
    "triggers_perception",
    "triggers_thinking",
    "bank_size_thinking",
];

/// One CSV line: a single turn of a single run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run_id: String,
    pub mode: String,
    pub turn: usize,
    pub prompt_tokens: u64,
    pub visual_tokens: u64,
    pub instruction_tokens: u64,
    pub output_tokens: u64,
    pub total: u64,
    pub triggers_perception: usize,
    pub triggers_thinking: usize,
    pub bank_size_thinking: usize,
}

/// Aggregate view of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run_id: String,
    pub mode: Mode,
    pub per_turn_totals: Vec<u64>,
    pub triggers_perception: Vec<usize>,
    pub triggers_thinking: Vec<usize>,
    pub bank_occupancy: Vec<usize>,
    pub total: u64,
    pub wall_clock: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    RunStart { version: String, run_id: String, mode: String, seed: u64, n_agents: usize, topology: String },
    TurnStart { run_id: String, turn: usize, agent: usize, prompt_tokens: u64, visual_tokens: u64 },
    DecodeSummary { run_id: String, turn: usize, steps: usize, mean_entropy: f64, max_entropy: f64, triggers_fired: usize, chunks: usize },
    Step { run_id: String, turn: usize, step: usize, token: u32, entropy: f64, injected: Option<MemoryKind> },
    Injection { run_id: String, turn: usize, step: usize, kind: MemoryKind, retrieved: Vec<usize>, rows: usize },
    TurnEnd {
        run_id: String,
        turn: usize,
        instruction_tokens: u64,
        output_tokens: u64,
        total: u64,
        overflow_runs: usize,
        bank_size_perception: usize,
        bank_size_thinking: usize,
    },
    RunEnd { run_id: String, turns: usize, total: u64 },
}

/// A finished run and its derived records.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub run_id: String,
    pub transcript: Transcript,
    pub rows: Vec<SummaryRow>,
    pub events: Vec<TraceEvent>,
    pub summary: RunSummary,
}

pub fn run_id(mode: Mode, seed: u64) -> String {
    format!("{}-s{seed}", mode.as_str())
}

pub fn summary_rows(run_id: &str, t: &Transcript) -> Vec<SummaryRow> {
    t.turns
        .iter()
        .map(|turn| SummaryRow {
            run_id: run_id.to_string(),
            mode: t.mode.as_str().to_string(),
            turn: turn.turn,
            prompt_tokens: turn.ledger.prompt,
            visual_tokens: turn.ledger.visual,
            instruction_tokens: turn.ledger.instruction,
            output_tokens: turn.ledger.output,
            total: turn.ledger.total(),
            triggers_perception: turn.injections(MemoryKind::Perception),
            triggers_thinking: turn.injections(MemoryKind::Thinking),
            bank_size_thinking: turn.bank_size_thinking,
        })
        .collect()
}

pub fn trace_events(cfg: &RunConfig, run_id: &str, t: &Transcript) -> Vec<TraceEvent> {
    let id = || run_id.to_string();
    let mut ev = vec![TraceEvent::RunStart {
        version: TRACE_VERSION.to_string(),
        run_id: id(),
        mode: t.mode.as_str().to_string(),
        seed: cfg.seed,
        n_agents: cfg.topology.n_agents,
        topology: format!("{:?}", cfg.topology.kind).to_lowercase(),
    }];
    for turn in &t.turns {
        let entropies = turn.trace.entropies();
        let n = entropies.len();
        ev.push(TraceEvent::TurnStart { run_id: id(), turn: turn.turn, agent: turn.agent, prompt_tokens: turn.ledger.prompt, visual_tokens: turn.ledger.visual });
        ev.push(TraceEvent::DecodeSummary {
            run_id: id(),
            turn: turn.turn,
            steps: n,
            mean_entropy: if n == 0 { 0.0 } else { entropies.iter().sum::<f64>() / n as f64 },
            max_entropy: entropies.iter().copied().fold(0.0, f64::max),
            triggers_fired: turn.triggers_fired,
            chunks: turn.chunks,
        });
        if cfg.output.steps {
            for (i, s) in turn.trace.steps.iter().enumerate() {
                ev.push(TraceEvent::Step { run_id: id(), turn: turn.turn, step: i, token: s.token, entropy: s.entropy, injected: s.injected.as_ref().map(|m| m.kind) });
            }
        }
        for e in &turn.events {
            ev.push(TraceEvent::Injection { run_id: id(), turn: turn.turn, step: e.step, kind: e.kind, retrieved: e.retrieved.clone(), rows: e.memory.rows() });
        }
        ev.push(TraceEvent::TurnEnd {
            run_id: id(),
            turn: turn.turn,
            instruction_tokens: turn.ledger.instruction,
            output_tokens: turn.ledger.output,
            total: turn.ledger.total(),
            overflow_runs: turn.overflow_runs,
            bank_size_perception: turn.bank_size_perception,
            bank_size_thinking: turn.bank_size_thinking,
        });
    }
    ev.push(TraceEvent::RunEnd { run_id: id(), turns: t.turns.len(), total: t.turns.iter().map(|x| x.ledger.total()).sum() });
    ev
}

/// Executes one mode without touching the filesystem.
pub fn run_mode(cfg: &RunConfig, mode: Mode) -> Result<RunOutput, Error> {
    let start = Instant::now();
    let transcript = execute(cfg, mode)?;
    let run_id = run_id(mode, cfg.seed);
    let rows = summary_rows(&run_id, &transcript);
    let events = trace_events(cfg, &run_id, &transcript);
    let summary = RunSummary {
        run_id: run_id.clone(),
        mode,
        per_turn_totals: rows.iter().map(|r| r.total).collect(),
        triggers_perception: rows.iter().map(|r| r.triggers_perception).collect(),
        triggers_thinking: rows.iter().map(|r| r.triggers_thinking).collect(),
        bank_occupancy: rows.iter().map(|r| r.bank_size_thinking).collect(),
        total: rows.iter().map(|r| r.total).sum(),
        wall_clock: start.elapsed(),
    };
    Ok(RunOutput { run_id, transcript, rows, events, summary })
}

pub fn csv_bytes(rows: &[SummaryRow]) -> Result<Vec<u8>, Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

pub fn jsonl_bytes(events: &[TraceEvent]) -> Vec<u8> {
    let mut out = Vec::new();
    for e in events {
        serde_json::to_writer(&mut out, e).expect("trace events serialise");
        out.push(b'\n');
    }
    out
}

/// Files produced by a command.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub files: Vec<PathBuf>,
}

fn write_file(path: PathBuf, bytes: &[u8], art: &mut Artifacts) -> Result<(), Error> {
    std::fs::File::create(&path)?.write_all(bytes)?;
    art.files.push(path);
    Ok(())
}

/// `run`: trace.jsonl, summary.csv and (optionally) snapshots/.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<(RunOutput, Artifacts), Error> {
    std::fs::create_dir_all(out)?;
    let output = run_mode(cfg, cfg.mode)?;
    let mut art = Artifacts::default();
    write_file(out.join("trace.jsonl"), &jsonl_bytes(&output.events), &mut art)?;
    write_file(out.join("summary.csv"), &csv_bytes(&output.rows)?, &mut art)?;
    if cfg.output.snapshot {
        art.files.extend(write_snapshots(cfg, &output.transcript, &out.join("snapshots"), false)?);
    }
    log::info!("{}: {} turns, {} tokens", output.run_id, output.rows.len(), output.summary.total);
    Ok((output, art))
}

/// `compare`: every mode on identical seeds, one collector writing
/// compare.csv and compare.jsonl in [`Mode::ALL`] order.
pub fn compare(cfg: &RunConfig, out: &Path, exec: Execution) -> Result<(Vec<RunOutput>, Artifacts), Error> {
    std::fs::create_dir_all(out)?;
    let outputs = exec.map(&Mode::ALL, |&m| run_mode(cfg, m)).into_iter().collect::<Result<Vec<_>, _>>()?;
    let rows: Vec<SummaryRow> = outputs.iter().flat_map(|o| o.rows.iter().cloned()).collect();
    let events: Vec<TraceEvent> = outputs.iter().flat_map(|o| o.events.iter().cloned()).collect();
    let mut art = Artifacts::default();
    write_file(out.join("compare.csv"), &csv_bytes(&rows)?, &mut art)?;
    write_file(out.join("compare.jsonl"), &jsonl_bytes(&events), &mut art)?;
    Ok((outputs, art))
}

/// Perception and thinking banks of a transcript, optionally with the
/// compressor set.
pub fn write_snapshots(cfg: &RunConfig, t: &Transcript, dir: &Path, with_compressors: bool) -> Result<Vec<PathBuf>, Error> {
    std::fs::create_dir_all(dir)?;
    let d = cfg.agent.d_model;
    let mut files = vec![dir.join("perception.json"), dir.join("thinking.json")];
    snapshot::save_bank(&t.perception, d, &files[0])?;
    snapshot::save_bank(&t.thinking, d, &files[1])?;
    if with_compressors {
        let path = dir.join("compressors.json");
        snapshot::save_compressors(&MemorySystem::init(cfg)?.compressors, &path)?;
        files.push(path);
    }
    Ok(files)
}
