//! Versioned JSON snapshots of banks and compressor parameters.
//!
//! Floats are written in shortest round-trip form and parsed with exact
//! decimal conversion, so a save/load cycle is bit-identical.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compressor::{CompressorParams, CompressorSet};
use crate::memory::MemoryBank;
use crate::numeric::Matrix;

pub const SNAPSHOT_VERSION: &str = "latmem-snapshot/1";

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("unsupported snapshot version {found:?}, expected {expected:?}")]
    Version { found: String, expected: &'static str },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotKind {
    Bank,
    Compressors,
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    version: String,
    kind: SnapshotKind,
    d_model: usize,
    payload: T,
}

fn check_matrix(m: &Matrix, what: &str) -> Result<(), SnapshotError> {
    if m.as_slice().len() != m.rows() * m.cols() {
        return Err(SnapshotError::Shape(format!("{what}: {}x{} with {} entries", m.rows(), m.cols(), m.as_slice().len())));
    }
    Ok(())
}

fn check_bank(bank: &MemoryBank, d_model: usize) -> Result<(), SnapshotError> {
    for (i, u) in bank.units().iter().enumerate() {
        check_matrix(&u.value, &format!("unit {i} value"))?;
        if u.key.len() != d_model || u.value.cols() != d_model {
            return Err(SnapshotError::Shape(format!(
                "unit {i}: key {} / value width {} for d_model {d_model}",
                u.key.len(),
                u.value.cols()
            )));
        }
        if u.value.rows() == 0 {
            return Err(SnapshotError::Shape(format!("unit {i}: empty value")));
        }
    }
    if bank.capacity().is_some_and(|c| bank.len() > c) {
        return Err(SnapshotError::Shape(format!("{} units exceed capacity", bank.len())));
    }
    Ok(())
}

fn check_params(p: &CompressorParams, d_model: usize) -> Result<(), SnapshotError> {
    if p.d_model() != d_model {
        return Err(SnapshotError::Shape(format!("compressor width {} for d_model {d_model}", p.d_model())));
    }
    check_matrix(&p.target_tokens, "target tokens")?;
    for l in &p.layers {
        for (m, name) in [(&l.wq, "wq"), (&l.wk, "wk"), (&l.wv, "wv"), (&l.w1, "w1"), (&l.w2, "w2")] {
            check_matrix(m, name)?;
        }
    }
    p.validate().map_err(|e| SnapshotError::Shape(e.to_string()))
}

fn encode<T: Serialize>(kind: SnapshotKind, d_model: usize, payload: &T) -> String {
    let env = Envelope { version: SNAPSHOT_VERSION.to_string(), kind, d_model, payload };
    serde_json::to_string(&env).expect("snapshot payloads contain only finite numbers")
}

fn decode<T: DeserializeOwned>(text: &str, kind: SnapshotKind) -> Result<(usize, T), SnapshotError> {
    #[derive(Deserialize)]
    struct Header {
        version: String,
        kind: SnapshotKind,
    }
    let header: Header = serde_json::from_str(text).map_err(|e| SnapshotError::Parse(e.to_string()))?;
    if header.version != SNAPSHOT_VERSION {
        return Err(SnapshotError::Version { found: header.version, expected: SNAPSHOT_VERSION });
    }
    if header.kind != kind {
        return Err(SnapshotError::Parse(format!("expected a {kind:?} snapshot, found {:?}", header.kind)));
    }
    let env: Envelope<T> = serde_json::from_str(text).map_err(|e| SnapshotError::Parse(e.to_string()))?;
    Ok((env.d_model, env.payload))
}

pub fn bank_to_json(bank: &MemoryBank, d_model: usize) -> String {
    encode(SnapshotKind::Bank, d_model, bank)
}

/// Parses a bank snapshot; `expected_d_model` rejects banks of another width.
pub fn bank_from_json(text: &str, expected_d_model: Option<usize>) -> Result<MemoryBank, SnapshotError> {
    let (d, bank): (usize, MemoryBank) = decode(text, SnapshotKind::Bank)?;
    if let Some(e) = expected_d_model.filter(|&e| e != d) {
        return Err(SnapshotError::Shape(format!("snapshot d_model {d}, expected {e}")));
    }
    check_bank(&bank, d)?;
    Ok(bank)
}

pub fn compressors_to_json(set: &CompressorSet) -> String {
    encode(SnapshotKind::Compressors, set.key.d_model(), set)
}

pub fn compressors_from_json(text: &str, expected_d_model: Option<usize>) -> Result<CompressorSet, SnapshotError> {
    let (d, set): (usize, CompressorSet) = decode(text, SnapshotKind::Compressors)?;
    if let Some(e) = expected_d_model.filter(|&e| e != d) {
        return Err(SnapshotError::Shape(format!("snapshot d_model {d}, expected {e}")));
    }
    for p in [&set.key, &set.merge, &set.refine] {
        check_params(p, d)?;
    }
    Ok(set)
}

pub fn save_bank(bank: &MemoryBank, d_model: usize, path: &Path) -> Result<(), SnapshotError> {
    Ok(std::fs::write(path, bank_to_json(bank, d_model))?)
}

pub fn load_bank(path: &Path, expected_d_model: Option<usize>) -> Result<MemoryBank, SnapshotError> {
    bank_from_json(&std::fs::read_to_string(path)?, expected_d_model)
}

pub fn save_compressors(set: &CompressorSet, path: &Path) -> Result<(), SnapshotError> {
    Ok(std::fs::write(path, compressors_to_json(set))?)
}

pub fn load_compressors(path: &Path, expected_d_model: Option<usize>) -> Result<CompressorSet, SnapshotError> {
    compressors_from_json(&std::fs::read_to_string(path)?, expected_d_model)
}

/// Which snapshot a file holds, without parsing the payload.
pub fn peek_kind(text: &str) -> Result<SnapshotKind, SnapshotError> {
    #[derive(Deserialize)]
    struct Header {
        version: String,
        kind: SnapshotKind,
    }
    let h: Header = serde_json::from_str(text).map_err(|e| SnapshotError::Parse(e.to_string()))?;
    if h.version != SNAPSHOT_VERSION {
        return Err(SnapshotError::Version { found: h.version, expected: SNAPSHOT_VERSION });
    }
    Ok(h.kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressor::CompressorShape;
    use crate::memory::{Chunk, MemoryKind, MemoryUnit};
    use crate::seed;

    fn bank(seed_: u64, d: usize, n: usize) -> (MemoryBank, CompressorSet) {
        let cs = CompressorSet::init(CompressorShape::new(d), 8, 8, seed_);
        let mut b = MemoryBank::thinking(50);
        let mut r = seed::rng(seed_);
        let chunks: Vec<Chunk> = (0..n).map(|i| Chunk { start: 0, end: 1 + i % 3, hidden: seed::gaussian_matrix(&mut r, 1 + i % 3, d, 1.0) }).collect();
        b.insert_thinking(&chunks, &cs).unwrap();
        if n > 0 {
            b.record_trigger(&[0]).unwrap();
        }
        (b, cs)
    }

    #[test]
    fn bank_round_trip_is_exact() {
        for s in 0..100 {
            let (b, _) = bank(s, 4, (s % 7) as usize + 1);
            assert_eq!(bank_from_json(&bank_to_json(&b, 4), Some(4)).unwrap(), b);
        }
        let (b, _) = bank(1, 8, 50);
        assert_eq!(b.len(), 50);
        assert_eq!(bank_from_json(&bank_to_json(&b, 8), None).unwrap(), b);
    }

    #[test]
    fn empty_perception_bank() {
        let b = MemoryBank::perception();
        let text = bank_to_json(&b, 16);
        assert_eq!(bank_from_json(&text, Some(16)).unwrap().len(), 0);
    }

    #[test]
    fn distinct_errors() {
        let (b, cs) = bank(3, 4, 5);
        let text = bank_to_json(&b, 4);
        assert!(matches!(bank_from_json(&text, Some(8)), Err(SnapshotError::Shape(_))));
        let old = text.replace(SNAPSHOT_VERSION, "latmem-snapshot/0");
        assert!(matches!(bank_from_json(&old, None), Err(SnapshotError::Version { .. })));
        assert!(matches!(bank_from_json(&text[..text.len() / 2], None), Err(SnapshotError::Parse(_))));
        assert!(matches!(bank_from_json(&compressors_to_json(&cs), None), Err(SnapshotError::Parse(_))));

        let mut units = b.units().to_vec();
        units[0] = MemoryUnit { key: vec![1.0; 3], ..units[0].clone() };
        let bad = MemoryBank::from_parts(MemoryKind::Thinking, Some(50), 0, units);
        assert!(matches!(bank_from_json(&bank_to_json(&bad, 4), None), Err(SnapshotError::Shape(_))));
    }

    #[test]
    fn compressor_round_trip() {
        for s in 0..5 {
            let cs = CompressorSet::init(CompressorShape::new(8), 8, 8, s);
            assert_eq!(compressors_from_json(&compressors_to_json(&cs), Some(8)).unwrap(), cs);
        }
        let cs = CompressorSet::init(CompressorShape::new(8), 8, 8, 0);
        assert!(matches!(compressors_from_json(&compressors_to_json(&cs), Some(16)), Err(SnapshotError::Shape(_))));
    }
}
