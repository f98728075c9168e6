//! Train/valid/test assignments with 20% rotation across five cycles.
//!
//! Nodes (or edges) are shuffled once with the split seed and cut into ten
//! equal blocks. Cycle `k` shifts every block's role by two blocks, so
//! across the five cycles each block takes every role.

use std::borrow::Cow;
use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, Topology};
use crate::error::{Error, Result};

pub const NUM_CYCLES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    #[serde(alias = "node")]
    NodeClassification,
    #[serde(alias = "link")]
    LinkPrediction,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "node" | "node-classification" => Ok(Task::NodeClassification),
            "link" | "link-prediction" => Ok(Task::LinkPrediction),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::NodeClassification => "node",
            Task::LinkPrediction => "link",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeRole {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub task: Task,
    pub seed: u64,
    pub cycle_index: usize,
    node_order: Vec<usize>,
    edge_order: Vec<(usize, usize)>,
    negative_order: Vec<(usize, usize)>,
    pub node_roles: Vec<NodeRole>,
    pub train_edges: Vec<(usize, usize)>,
    pub valid_edges: Vec<(usize, usize)>,
    pub test_edges: Vec<(usize, usize)>,
    pub train_negatives: Vec<(usize, usize)>,
    pub valid_negatives: Vec<(usize, usize)>,
    pub test_negatives: Vec<(usize, usize)>,
}

fn block_of(position: usize, len: usize) -> usize {
    position * 10 / len.max(1)
}

fn node_role(block: usize) -> NodeRole {
    match block {
        0..=4 => NodeRole::Train,
        5..=7 => NodeRole::Valid,
        _ => NodeRole::Test,
    }
}

fn edge_role(block: usize) -> NodeRole {
    match block {
        0..=7 => NodeRole::Train,
        8 => NodeRole::Valid,
        _ => NodeRole::Test,
    }
}

impl SplitSpec {
    /// Cycle-0 split: nodes 5:3:2, edges 8:1:1 with one sampled non-edge
    /// per edge.
    pub fn new(graph: &Graph, task: Task, seed: u64) -> Result<SplitSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut node_order: Vec<usize> = (0..graph.num_nodes()).collect();
        node_order.shuffle(&mut rng);
        let (edge_order, negative_order) = match task {
            Task::NodeClassification => {
                if graph.labels().is_none() {
                    return Err(Error::invalid("node classification needs labels"));
                }
                (Vec::new(), Vec::new())
            }
            Task::LinkPrediction => {
                let mut edges = graph.edges();
                if edges.is_empty() {
                    return Err(Error::invalid("link prediction needs at least one edge"));
                }
                edges.shuffle(&mut rng);
                let negatives = sample_negatives(graph, edges.len(), &mut rng);
                (edges, negatives)
            }
        };
        let mut spec = SplitSpec {
            task,
            seed,
            cycle_index: 0,
            node_order,
            edge_order,
            negative_order,
            node_roles: Vec::new(),
            train_edges: Vec::new(),
            valid_edges: Vec::new(),
            test_edges: Vec::new(),
            train_negatives: Vec::new(),
            valid_negatives: Vec::new(),
            test_negatives: Vec::new(),
        };
        spec.assign(0);
        Ok(spec)
    }

    fn assign(&mut self, k: usize) {
        self.cycle_index = k;
        let shift = 2 * k;
        let n = self.node_order.len();
        self.node_roles = vec![NodeRole::Train; n];
        for (pos, &node) in self.node_order.iter().enumerate() {
            self.node_roles[node] = node_role((block_of(pos, n) + shift) % 10);
        }
        let split = |order: &[(usize, usize)]| {
            let mut parts = (Vec::new(), Vec::new(), Vec::new());
            for (pos, &e) in order.iter().enumerate() {
                match edge_role((block_of(pos, order.len()) + shift) % 10) {
                    NodeRole::Train => parts.0.push(e),
                    NodeRole::Valid => parts.1.push(e),
                    NodeRole::Test => parts.2.push(e),
                }
            }
            parts
        };
        (self.train_edges, self.valid_edges, self.test_edges) = split(&self.edge_order);
        (self.train_negatives, self.valid_negatives, self.test_negatives) =
            split(&self.negative_order);
    }

    pub fn nodes_with(&self, role: NodeRole) -> Vec<usize> {
        (0..self.node_roles.len())
            .filter(|&i| self.node_roles[i] == role)
            .collect()
    }

    /// The graph message passing runs on: the full graph for node
    /// classification, the training edges only for link prediction.
    pub fn message_graph<'g>(&self, graph: &'g Graph) -> Result<Cow<'g, Graph>> {
        match self.task {
            Task::NodeClassification => Ok(Cow::Borrowed(graph)),
            Task::LinkPrediction => Ok(Cow::Owned(graph.with_edges(&self.train_edges)?)),
        }
    }

    /// Default evaluation edge set: validation and test edges plus their
    /// negatives.
    pub fn eval_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.valid_edges);
        out.extend_from_slice(&self.test_edges);
        out.extend_from_slice(&self.valid_negatives);
        out.extend_from_slice(&self.test_negatives);
        out
    }
}

/// Rotates the split by `k` blocks of 20%; `k = 0` is the split itself.
///
/// # Panics
/// If `k >= 5`.
pub fn cycle_split(spec: &SplitSpec, k: usize) -> SplitSpec {
    assert!(k < NUM_CYCLES, "split cycle {k} out of range 0..5");
    let mut out = spec.clone();
    out.assign(k);
    out
}

fn sample_negatives(graph: &Graph, count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let n = graph.num_nodes();
    let total_pairs = n * n.saturating_sub(1) / 2;
    let available = total_pairs - graph.num_edges();
    let count = count.min(available);
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    if available <= 4 * count {
        // dense: enumerate and shuffle
        let mut all: Vec<_> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .filter(|&(a, b)| !graph.has_edge(a, b))
            .collect();
        all.shuffle(rng);
        all.truncate(count);
        return all;
    }
    while out.len() < count {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a == b {
            continue;
        }
        let pair = (a.min(b), a.max(b));
        if graph.has_edge(pair.0, pair.1) || !seen.insert(pair) {
            continue;
        }
        out.push(pair);
    }
    out
}
