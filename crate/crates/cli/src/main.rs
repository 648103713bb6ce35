use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latmem::config::{Mode, RunConfig};
use latmem::harness::snapshot::{self, SnapshotKind};
use latmem::harness::verify::{self, VerifyOptions};
use latmem::harness::{self, write_snapshots};
use latmem::par::Execution;
use latmem::topology::execute;
use latmem::Error;

#[derive(Parser)]
#[command(name = "latmem", version, about = "Latent memory simulator for multi-agent decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML or JSON configuration file; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// latent | conclusion_only | perception | thinking | full_content
    #[arg(long, value_name = "NAME")]
    mode: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one run and write trace.jsonl, summary.csv and snapshots.
    Run(Common),
    /// Run every mode on identical seeds and write compare.csv / compare.jsonl.
    Compare(Common),
    /// Run the self-check suites.
    Verify {
        /// Only run these suites.
        #[arg(long = "suite", value_name = "NAME")]
        suites: Vec<String>,
        #[arg(long, hide = true)]
        fault_mask_constant: Option<f64>,
    },
    /// Write bank and compressor snapshots, or check an existing snapshot.
    Snapshot {
        #[command(flatten)]
        common: Common,
        /// Load and validate this snapshot instead of writing new ones.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<(RunConfig, PathBuf), Error> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(m) = &c.mode {
        cfg.mode = Mode::parse(m).ok_or_else(|| Error::Config { line: None, message: format!("unknown mode {m:?}") })?;
    }
    cfg.validate()?;
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    Ok((cfg, out))
}

fn check_snapshot(path: &Path, d_model: usize) -> Result<(), Error> {
    let text = std::fs::read_to_string(path)?;
    match snapshot::peek_kind(&text)? {
        SnapshotKind::Bank => {
            let bank = snapshot::bank_from_json(&text, Some(d_model))?;
            println!("{}: {} bank, {} units", path.display(), bank.kind().as_str(), bank.len());
        }
        SnapshotKind::Compressors => {
            snapshot::compressors_from_json(&text, Some(d_model))?;
            println!("{}: compressor set, d_model {d_model}", path.display());
        }
    }
    Ok(())
}

fn dispatch(cmd: Command) -> Result<i32, Error> {
    match cmd {
        Command::Run(c) => {
            let (cfg, out) = load_config(&c)?;
            let (output, art) = harness::run(&cfg, &out)?;
            log::info!("wall clock {:?}", output.summary.wall_clock);
            println!("{}: {} turns, total {} tokens", output.run_id, output.rows.len(), output.summary.total);
            for f in art.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Compare(c) => {
            let (cfg, out) = load_config(&c)?;
            let (outputs, art) = harness::compare(&cfg, &out, Execution::auto())?;
            for o in &outputs {
                println!("{:<16} total {}", o.summary.mode.as_str(), o.summary.total);
            }
            for f in art.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Verify { suites, fault_mask_constant } => {
            let mut opts = VerifyOptions::default();
            if let Some(c) = fault_mask_constant {
                opts.mask_constant = c;
            }
            let known = verify::suite_names();
            if let Some(bad) = suites.iter().find(|s| !known.contains(&s.as_str())) {
                return Err(Error::Config { line: None, message: format!("unknown suite {bad:?}; known: {}", known.join(", ")) });
            }
            let only: Vec<&str> = suites.iter().map(String::as_str).collect();
            let report = verify::run_suites(&opts, &only);
            for s in &report.suites {
                println!("{}", s.line());
                log::info!("{} took {} ms", s.name, s.millis);
            }
            if !report.passed() {
                let names: Vec<&str> = report.failures().map(|s| s.name).collect();
                eprintln!("verify failed: {}", names.join(", "));
                return Ok(1);
            }
        }
        Command::Snapshot { common, input } => {
            let (cfg, out) = load_config(&common)?;
            match input {
                Some(path) => check_snapshot(&path, cfg.agent.d_model)?,
                None => {
                    let transcript = execute(&cfg, cfg.mode)?;
                    for f in write_snapshots(&cfg, &transcript, &out, true)? {
                        println!("wrote {}", f.display());
                    }
                }
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LATMEM_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
