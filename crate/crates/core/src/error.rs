use thiserror::Error;

use crate::agent::AgentError;
use crate::compressor::CompressorError;
use crate::memory::MemoryError;
use crate::topology::TopologyError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config { line: Option<usize>, message: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("snapshot: {0}")]
    Snapshot(#[from] crate::harness::SnapshotError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Compressor(#[from] CompressorError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit status for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Invariant(_) | Error::Memory(_) | Error::Agent(_) | Error::Compressor(_) | Error::Topology(_) => 3,
            Error::Snapshot(_) | Error::Io(_) => 1,
        }
    }
}
