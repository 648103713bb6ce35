use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{Chunk, MemoryError, MemoryKind, MemoryUnit};
use crate::compressor::{merge_values, CompressorSet};
use crate::numeric::cosine_sim;

const QUANTILES: usize = 5;

/// Five disjoint index sets ordered by ascending triggering rate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantilePartition {
    pub sets: [Vec<usize>; QUANTILES],
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverflowReport {
    pub deleted: usize,
    pub merged: usize,
    pub evicted: usize,
}

impl OverflowReport {
    pub fn removed(&self) -> usize {
        self.deleted + self.merged + self.evicted
    }

    pub fn ran(&self) -> bool {
        self.removed() > 0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InsertReport {
    pub inserted: usize,
    pub overflow_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    kind: MemoryKind,
    capacity: Option<usize>,
    global_trigger_count: u64,
    units: Vec<MemoryUnit>,
}

fn cmp_rate(a: &MemoryUnit, b: &MemoryUnit, global: u64) -> Ordering {
    let (an, ad) = a.rate_parts(global);
    let (bn, bd) = b.rate_parts(global);
    (an as u128 * bd as u128).cmp(&(bn as u128 * ad as u128))
}

impl MemoryBank {
    pub fn perception() -> Self {
        Self { kind: MemoryKind::Perception, capacity: None, global_trigger_count: 0, units: Vec::new() }
    }

    pub fn thinking(capacity: usize) -> Self {
        Self { kind: MemoryKind::Thinking, capacity: Some(capacity), global_trigger_count: 0, units: Vec::new() }
    }

    /// Rebuilds a bank from stored parts, e.g. a snapshot.
    pub fn from_parts(kind: MemoryKind, capacity: Option<usize>, global_trigger_count: u64, units: Vec<MemoryUnit>) -> Self {
        Self { kind, capacity, global_trigger_count, units }
    }

    pub fn kind(&self) -> MemoryKind {
        self.kind
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn global_trigger_count(&self) -> u64 {
        self.global_trigger_count
    }

    pub fn units(&self) -> &[MemoryUnit] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &[f64]> {
        self.units.iter().map(|u| u.key.as_slice())
    }

    /// Appends without capacity management; stamps `inserted_at`.
    pub fn push(&mut self, mut unit: MemoryUnit) {
        unit.inserted_at = self.global_trigger_count;
        unit.hit_count = 0;
        self.units.push(unit);
    }

    pub fn record_trigger(&mut self, hits: &[usize]) -> Result<(), MemoryError> {
        for (n, &i) in hits.iter().enumerate() {
            if i >= self.units.len() {
                return Err(MemoryError::IndexOutOfRange { index: i, len: self.units.len() });
            }
            if hits[..n].contains(&i) {
                return Err(MemoryError::DuplicateIndex(i));
            }
        }
        self.global_trigger_count += 1;
        for &i in hits {
            self.units[i].hit_count += 1;
        }
        Ok(())
    }

    /// Mean cosine similarity of every unit's key to all other keys.
    pub fn similarities(&self) -> Result<Vec<f64>, MemoryError> {
        let m = self.units.len();
        if m < 2 {
            return Err(MemoryError::UndefinedSimilarity(m));
        }
        let mut sums = vec![0.0; m];
        for i in 0..m {
            for j in i + 1..m {
                let s = cosine_sim(&self.units[i].key, &self.units[j].key);
                sums[i] += s;
                sums[j] += s;
            }
        }
        Ok(sums.into_iter().map(|s| s / (m - 1) as f64).collect())
    }

    pub fn global_similarity(&self, index: usize) -> Result<f64, MemoryError> {
        let m = self.units.len();
        if m < 2 {
            return Err(MemoryError::UndefinedSimilarity(m));
        }
        if index >= m {
            return Err(MemoryError::IndexOutOfRange { index, len: m });
        }
        let key = &self.units[index].key;
        let total: f64 = self.units.iter().enumerate().filter(|&(j, _)| j != index).map(|(_, u)| cosine_sim(key, &u.key)).sum();
        Ok(total / (m - 1) as f64)
    }

    /// `None` for banks smaller than five units.
    pub fn partition_quantiles(&self) -> Option<QuantilePartition> {
        let m = self.units.len();
        if m < QUANTILES {
            return None;
        }
        let mut order: Vec<usize> = (0..m).collect();
        let g = self.global_trigger_count;
        order.sort_by(|&a, &b| cmp_rate(&self.units[a], &self.units[b], g).then(a.cmp(&b)));
        let (base, extra) = (m / QUANTILES, m % QUANTILES);
        let mut sets: [Vec<usize>; QUANTILES] = Default::default();
        let mut it = order.into_iter();
        for (q, set) in sets.iter_mut().enumerate() {
            let size = base + usize::from(q < extra);
            set.extend(it.by_ref().take(size));
        }
        Some(QuantilePartition { sets })
    }

    /// Prunes and merges when the bank is full; a no-op below capacity.
    pub fn manage_overflow(&mut self, compressors: &CompressorSet) -> Result<OverflowReport, MemoryError> {
        let Some(cap) = self.capacity else {
            return Ok(OverflowReport::default());
        };
        if self.units.len() < cap {
            return Ok(OverflowReport::default());
        }
        let Some(part) = self.partition_quantiles() else {
            return Ok(self.evict_lowest());
        };
        let s = self.similarities()?;
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let [set1, _, _, set4, set5] = &part.sets;

        let mut remove = vec![false; self.units.len()];
        let mut report = OverflowReport::default();
        for &i in set5 {
            if s[i] < mean {
                remove[i] = true;
                report.deleted += 1;
            }
        }

        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        for &i in set4.iter().filter(|&&i| s[i] < mean) {
            let mut best: Option<(usize, f64)> = None;
            for &b in set1 {
                let sim = cosine_sim(&self.units[i].key, &self.units[b].key);
                if best.is_none_or(|(bi, bs)| sim > bs || (sim == bs && b < bi)) {
                    best = Some((b, sim));
                }
            }
            let (b, _) = best.expect("set 1 is non-empty for banks of five or more");
            match groups.iter_mut().find(|(base, _)| *base == b) {
                Some((_, members)) => members.push(i),
                None => groups.push((b, vec![i])),
            }
        }
        groups.sort_by_key(|(b, _)| *b);
        for (b, members) in &groups {
            let others: Vec<&_> = members.iter().map(|&i| &self.units[i].value).collect();
            let value = merge_values(&self.units[*b].value, &others, &compressors.merge)?;
            let key = super::make_key(&value, &compressors.key)?;
            let base = &mut self.units[*b];
            base.value = value;
            base.key = key;
            for &i in members {
                remove[i] = true;
                report.merged += 1;
            }
        }

        if report.removed() == 0 {
            return Ok(self.evict_lowest());
        }
        let mut idx = 0;
        self.units.retain(|_| {
            let keep = !remove[idx];
            idx += 1;
            keep
        });
        log::debug!("overflow: deleted {} merged {}", report.deleted, report.merged);
        Ok(report)
    }

    fn evict_lowest(&mut self) -> OverflowReport {
        let g = self.global_trigger_count;
        let victim = (0..self.units.len()).min_by(|&a, &b| cmp_rate(&self.units[a], &self.units[b], g).then(a.cmp(&b)));
        match victim {
            Some(v) => {
                self.units.remove(v);
                OverflowReport { evicted: 1, ..Default::default() }
            }
            None => OverflowReport::default(),
        }
    }

    /// Appends one unit per chunk, managing overflow before each insertion.
    pub fn insert_thinking(&mut self, chunks: &[Chunk], compressors: &CompressorSet) -> Result<InsertReport, MemoryError> {
        if self.kind != MemoryKind::Thinking {
            return Err(MemoryError::KindMismatch { expected: MemoryKind::Thinking });
        }
        let mut report = InsertReport::default();
        for chunk in chunks {
            let unit = MemoryUnit::new(MemoryKind::Thinking, chunk.hidden.clone(), &compressors.key)?;
            if let Some(cap) = self.capacity {
                while self.units.len() + 1 > cap {
                    let r = self.manage_overflow(compressors)?;
                    if !r.ran() {
                        break;
                    }
                    report.overflow_runs += 1;
                }
                if self.units.len() + 1 > cap {
                    continue;
                }
            }
            self.push(unit);
            report.inserted += 1;
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressor::CompressorShape;
    use crate::memory::make_key;
    use crate::numeric::Matrix;
    use crate::seed;
    use proptest::prelude::*;

    fn set(d: usize) -> CompressorSet {
        CompressorSet::init(CompressorShape::new(d), 8, 8, 5)
    }

    fn unit_with_key(key: Vec<f64>) -> MemoryUnit {
        let d = key.len();
        MemoryUnit { key, value: Matrix::zeros(1, d), kind: MemoryKind::Thinking, inserted_at: 0, hit_count: 0 }
    }

    fn chunk(rows: usize, d: usize, salt: u64) -> Chunk {
        let mut r = seed::rng(salt);
        Chunk { start: 0, end: rows, hidden: seed::gaussian_matrix(&mut r, rows, d, 1.0) }
    }

    fn random_bank(n: usize, d: usize, cs: &CompressorSet, salt: u64) -> MemoryBank {
        let mut bank = MemoryBank::thinking(n);
        for i in 0..n {
            bank.push(MemoryUnit::new(MemoryKind::Thinking, chunk(1 + i % 4, d, salt * 1000 + i as u64).hidden, &cs.key).unwrap());
        }
        bank
    }

    #[test]
    fn similarity_cases() {
        let mut b = MemoryBank::thinking(10);
        b.push(unit_with_key(vec![1.0, 0.0]));
        assert_eq!(b.global_similarity(0), Err(MemoryError::UndefinedSimilarity(1)));
        b.push(unit_with_key(vec![0.6, 0.8]));
        assert!((b.global_similarity(0).unwrap() - 0.6).abs() < 1e-12);
        assert!((b.global_similarity(1).unwrap() - 0.6).abs() < 1e-12);

        let r = std::f64::consts::FRAC_1_SQRT_2;
        let mut b = MemoryBank::thinking(10);
        for k in [vec![1.0, 0.0], vec![0.0, 1.0], vec![r, r]] {
            b.push(unit_with_key(k));
        }
        assert!((b.global_similarity(2).unwrap() - r).abs() < 1e-9);
        let all = b.similarities().unwrap();
        assert!((0..3).all(|i| (all[i] - b.global_similarity(i).unwrap()).abs() < 1e-12));

        let mut b = MemoryBank::thinking(10);
        for _ in 0..4 {
            b.push(unit_with_key(vec![1.0, 2.0, 3.0]));
        }
        assert!(b.similarities().unwrap().iter().all(|&s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn quantile_sizes_and_ties() {
        let mut b = MemoryBank::thinking(20);
        for _ in 0..12 {
            b.push(unit_with_key(vec![1.0]));
        }
        let p = b.partition_quantiles().unwrap();
        assert_eq!(p.sets.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 2, 2, 2]);
        assert_eq!(p.sets.concat(), (0..12).collect::<Vec<_>>());
        let mut b = MemoryBank::thinking(20);
        for _ in 0..10 {
            b.push(unit_with_key(vec![1.0]));
        }
        assert_eq!(b.partition_quantiles().unwrap().sets.iter().map(Vec::len).collect::<Vec<_>>(), vec![2; 5]);
        b.units.truncate(4);
        assert!(b.partition_quantiles().is_none());
    }

    #[test]
    fn partition_orders_by_rate() {
        let mut b = MemoryBank::thinking(20);
        for _ in 0..10 {
            b.push(unit_with_key(vec![1.0]));
        }
        b.record_trigger(&[9, 8]).unwrap();
        b.record_trigger(&[9]).unwrap();
        let p = b.partition_quantiles().unwrap();
        assert_eq!(p.sets[4], vec![8, 9]);
        assert_eq!(p.sets[0], vec![0, 1]);
    }

    #[test]
    fn trigger_bookkeeping() {
        let mut b = MemoryBank::thinking(50);
        for _ in 0..6 {
            b.push(unit_with_key(vec![1.0]));
        }
        b.record_trigger(&[3]).unwrap();
        assert_eq!(b.global_trigger_count(), 1);
        assert_eq!(b.units().iter().map(|u| u.hit_count).collect::<Vec<_>>(), vec![0, 0, 0, 1, 0, 0]);
        b.record_trigger(&[0, 1, 2, 4, 5]).unwrap();
        assert_eq!(b.units().iter().map(|u| u.hit_count).sum::<u64>(), 6);
        assert_eq!(b.global_trigger_count(), 2);
        assert!(b.record_trigger(&[6]).is_err());
        assert!(b.record_trigger(&[1, 1]).is_err());
        assert_eq!(b.global_trigger_count(), 2);

        let mut b = MemoryBank::thinking(50);
        for _ in 0..10 {
            b.record_trigger(&[]).unwrap();
        }
        b.push(unit_with_key(vec![1.0]));
        assert_eq!(b.units()[0].inserted_at, 10);
        for t in 0..10 {
            b.record_trigger(if t % 2 == 0 { &[0][..] } else { &[][..] }).unwrap();
        }
        assert_eq!(b.units()[0].trigger_rate(b.global_trigger_count()), 0.5);
    }

    #[test]
    fn insert_without_overflow() {
        let cs = set(8);
        let mut b = MemoryBank::thinking(50);
        b.record_trigger(&[]).unwrap();
        let chunks: Vec<Chunk> = (0..3).map(|i| chunk(4, 8, i)).collect();
        let r = b.insert_thinking(&chunks, &cs).unwrap();
        assert_eq!((b.len(), r.overflow_runs), (3, 0));
        assert!(b.units().iter().all(|u| u.hit_count == 0 && u.inserted_at == 1));
        assert!(MemoryBank::perception().insert_thinking(&chunks, &cs).is_err());
    }

    #[test]
    fn insert_at_capacity_runs_overflow() {
        let cs = set(8);
        let mut b = random_bank(50, 8, &cs, 1);
        let r = b.insert_thinking(&[chunk(5, 8, 999)], &cs).unwrap();
        assert!(r.overflow_runs >= 1);
        assert!(b.len() <= 50);
        for u in b.units() {
            assert_eq!(u.key, make_key(&u.value, &cs.key).unwrap());
            assert!(u.value.rows() <= 8);
        }
    }

    #[test]
    fn below_mean_set5_units_are_deleted() {
        let cs = set(2);
        let mut b = MemoryBank::thinking(10);
        // eight aligned keys, two orthogonal outliers that get hit the most
        for i in 0..10 {
            let key = if i >= 8 { vec![-1.0, 1.0] } else { vec![1.0, 0.1 * i as f64] };
            b.push(unit_with_key(key));
        }
        b.record_trigger(&[8, 9]).unwrap();
        let r = b.manage_overflow(&cs).unwrap();
        assert_eq!(r.deleted, 2);
        assert_eq!(b.len(), 8);
        assert!(b.units().iter().all(|u| u.key[0] == 1.0));
    }

    #[test]
    fn uniform_similarity_falls_back_to_single_eviction() {
        let cs = set(3);
        let mut b = MemoryBank::thinking(6);
        for _ in 0..6 {
            b.push(unit_with_key(vec![1.0, 1.0, 1.0]));
        }
        b.record_trigger(&[0]).unwrap();
        let r = b.manage_overflow(&cs).unwrap();
        assert_eq!(r, OverflowReport { evicted: 1, ..Default::default() });
        assert_eq!(b.len(), 5);
        assert_eq!(b.units()[0].hit_count, 1, "lowest-rate oldest unit (index 1) went first");
    }

    #[test]
    fn overflow_idempotent_and_noop_below_capacity() {
        let cs = set(8);
        let mut b = random_bank(12, 8, &cs, 3);
        b.record_trigger(&[0, 5, 7]).unwrap();
        b.manage_overflow(&cs).unwrap();
        let after = b.clone();
        assert_eq!(b.manage_overflow(&cs).unwrap(), OverflowReport::default());
        assert_eq!(b, after);
        assert!(MemoryBank::perception().manage_overflow(&cs).unwrap() == OverflowReport::default());
    }

    fn fuzz_bank(ops: &[(u8, u8)], cap: usize) -> MemoryBank {
        let cs = set(4);
        let mut b = MemoryBank::thinking(cap);
        for (n, &(op, arg)) in ops.iter().enumerate() {
            if op % 3 == 0 && !b.is_empty() {
                let hits: Vec<usize> = (0..b.len()).filter(|i| (i + arg as usize).is_multiple_of(4)).take(5).collect();
                b.record_trigger(&hits).unwrap();
            } else {
                b.insert_thinking(&[chunk(1 + arg as usize % 6, 4, n as u64)], &cs).unwrap();
            }
            let g = b.global_trigger_count();
            assert!(b.len() <= cap);
            assert!(b.units().iter().all(|u| u.trigger_rate(g) <= 1.0));
        }
        b
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn prop_capacity_and_rates(ops in prop::collection::vec((any::<u8>(), any::<u8>()), 1..80), cap in 5usize..12) {
            let b = fuzz_bank(&ops, cap);
            prop_assert!(b.len() <= cap);
        }

        #[test]
        fn prop_partition_is_partition(hits in prop::collection::vec(prop::collection::vec(0usize..30, 0..5), 0..20), m in 5usize..30) {
            let mut b = MemoryBank::thinking(64);
            for i in 0..m {
                b.push(unit_with_key(vec![1.0, i as f64]));
            }
            for h in hits {
                let mut h: Vec<usize> = h.into_iter().filter(|&i| i < m).collect();
                h.sort_unstable();
                h.dedup();
                b.record_trigger(&h).unwrap();
            }
            let p = b.partition_quantiles().unwrap();
            let mut all = p.sets.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..m).collect::<Vec<_>>());
            let sizes: Vec<usize> = p.sets.iter().map(Vec::len).collect();
            prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
            let g = b.global_trigger_count();
            let flat = p.sets.concat();
            for w in flat.windows(2) {
                let o = cmp_rate(&b.units()[w[0]], &b.units()[w[1]], g);
                prop_assert!(o == Ordering::Less || (o == Ordering::Equal && w[0] < w[1]));
            }
        }
    }
}
