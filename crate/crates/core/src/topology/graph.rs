use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TopologyError;
use crate::seed::{self, mix, unit_f64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Linear,
    Layered,
    Centralized,
    Random,
    Complete,
    Custom,
}

impl TopologyKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "linear" => Self::Linear,
            "layered" => Self::Layered,
            "centralized" => Self::Centralized,
            "random" => Self::Random,
            "complete" => Self::Complete,
            "custom" => Self::Custom,
            _ => return None,
        })
    }
}

/// Shape parameters for [`build_topology`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub kind: TopologyKind,
    pub n_agents: usize,
    /// Layer sizes for `Layered`; empty means layers of two.
    #[serde(default)]
    pub layers: Vec<usize>,
    /// Edge probability for `Random`.
    #[serde(default = "default_edge_prob")]
    pub edge_prob: f64,
    /// Edge list for `Custom`, 0-indexed.
    #[serde(default)]
    pub edges: Vec<(usize, usize)>,
}

fn default_edge_prob() -> f64 {
    0.3
}

impl TopologySpec {
    pub fn new(kind: TopologyKind, n_agents: usize) -> Self {
        Self { kind, n_agents, layers: Vec::new(), edge_prob: default_edge_prob(), edges: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyGraph {
    pub kind: TopologyKind,
    pub n_agents: usize,
    /// Sorted, deduplicated `(from, to)` pairs.
    pub edges: Vec<(usize, usize)>,
}

impl TopologyGraph {
    pub fn predecessors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |e| e.1 == v).map(|e| e.0)
    }

    pub fn successors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |e| e.0 == v).map(|e| e.1)
    }

    pub fn in_degree(&self, v: usize) -> usize {
        self.predecessors(v).count()
    }

    pub fn out_degree(&self, v: usize) -> usize {
        self.successors(v).count()
    }

    /// Kahn order with the smallest ready index first; `None` on a cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let mut indeg: Vec<usize> = (0..self.n_agents).map(|v| self.in_degree(v)).collect();
        let mut ready: BTreeSet<usize> = (0..self.n_agents).filter(|&v| indeg[v] == 0).collect();
        let mut order = Vec::with_capacity(self.n_agents);
        while let Some(v) = ready.pop_first() {
            order.push(v);
            for s in self.successors(v) {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    ready.insert(s);
                }
            }
        }
        (order.len() == self.n_agents).then_some(order)
    }

    pub fn is_acyclic(&self) -> bool {
        self.topological_order().is_some()
    }

    /// Turn order: topological for DAGs, a seeded permutation otherwise.
    pub fn schedule(&self, seed: u64) -> Vec<usize> {
        self.topological_order().unwrap_or_else(|| {
            let mut order: Vec<usize> = (0..self.n_agents).collect();
            order.shuffle(&mut seed::rng(seed));
            order
        })
    }
}

fn finish(kind: TopologyKind, n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> TopologyGraph {
    let set: BTreeSet<(usize, usize)> = edges.into_iter().collect();
    TopologyGraph { kind, n_agents: n, edges: set.into_iter().collect() }
}

pub fn build_topology(spec: &TopologySpec, seed: u64) -> Result<TopologyGraph, TopologyError> {
    let n = spec.n_agents;
    if n == 0 {
        return Err(TopologyError::Invalid("n_agents must be at least 1".into()));
    }
    let graph = match spec.kind {
        TopologyKind::Linear => finish(spec.kind, n, (1..n).map(|i| (i - 1, i))),
        TopologyKind::Complete => finish(spec.kind, n, (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))),
        TopologyKind::Centralized => finish(spec.kind, n, (1..n).flat_map(|i| [(0, i), (i, 0)])),
        TopologyKind::Layered => {
            let layers = if spec.layers.is_empty() {
                let mut l = vec![2; n / 2];
                if n % 2 == 1 {
                    l.push(1);
                }
                l
            } else {
                spec.layers.clone()
            };
            if layers.iter().sum::<usize>() != n || layers.contains(&0) {
                return Err(TopologyError::Invalid(format!("layer sizes {layers:?} do not sum to {n}")));
            }
            let mut edges = Vec::new();
            let mut start = 0;
            for w in layers.windows(2) {
                let next = start + w[0];
                for a in start..next {
                    for b in next..next + w[1] {
                        edges.push((a, b));
                    }
                }
                start = next;
            }
            finish(spec.kind, n, edges)
        }
        TopologyKind::Random => {
            if !(0.0..=1.0).contains(&spec.edge_prob) {
                return Err(TopologyError::Invalid(format!("edge_prob {} outside [0, 1]", spec.edge_prob)));
            }
            let mut rng = seed::rng(seed);
            let mut edges = Vec::new();
            for j in 1..n {
                let mut any = false;
                for i in 0..j {
                    if rng.random::<f64>() < spec.edge_prob {
                        edges.push((i, j));
                        any = true;
                    }
                }
                if !any {
                    let i = (unit_f64(mix(seed, j as u64)) * j as f64) as usize;
                    edges.push((i.min(j - 1), j));
                }
            }
            finish(spec.kind, n, edges)
        }
        TopologyKind::Custom => {
            for &(a, b) in &spec.edges {
                if a >= n || b >= n {
                    return Err(TopologyError::Invalid(format!("edge ({a}, {b}) out of range for {n} agents")));
                }
                if a == b {
                    return Err(TopologyError::Invalid(format!("self-loop at agent {a}")));
                }
            }
            finish(spec.kind, n, spec.edges.iter().copied())
        }
    };
    Ok(graph)
}
