//! Undirected graphs in compressed-row form, node-removal views, dataset
//! ingestion and synthetic generators.

mod io;
mod split;
mod synth;

use std::collections::BTreeSet;
use std::sync::Arc;

pub use io::{load_dataset, write_dataset, DatasetManifest};
pub use split::{cycle_split, NodeRole, SplitSpec, Task, NUM_CYCLES};
pub use synth::{generate_synthetic, SynthKind, SynthParams};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Read-only adjacency as seen by message passing.
///
/// Implemented by [`Graph`] and by [`RemovalView`], so every layer and
/// influence computation runs unchanged on a graph with one node deleted.
pub trait Topology: Sync {
    fn num_nodes(&self) -> usize;

    /// Number of neighbors, self-loops excluded.
    fn degree(&self, node: usize) -> usize;

    fn neighbors(&self, node: usize) -> impl Iterator<Item = usize> + '_;

    fn features(&self) -> &Arc<Tensor>;
}

/// Immutable undirected graph. Adjacency is stored symmetrically with
/// sorted neighbor lists, no duplicates and no self-edges.
#[derive(Debug, Clone)]
pub struct Graph {
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
    degrees: Vec<usize>,
    features: Arc<Tensor>,
    labels: Option<Vec<usize>>,
    num_classes: usize,
}

impl Graph {
    /// Builds a graph from an undirected edge list. Direction is ignored,
    /// duplicates are merged and self-edges dropped; the number of dropped
    /// self-edges is returned alongside the graph.
    pub fn from_edges(
        num_nodes: usize,
        edges: &[(usize, usize)],
        features: impl Into<Arc<Tensor>>,
        labels: Option<Vec<usize>>,
    ) -> Result<(Self, usize)> {
        let features = features.into();
        if features.rows() != num_nodes {
            return Err(Error::invalid(format!(
                "feature matrix has {} rows, expected {num_nodes}",
                features.rows()
            )));
        }
        let mut adj: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); num_nodes];
        let mut self_edges = 0;
        for &(a, b) in edges {
            for node in [a, b] {
                if node >= num_nodes {
                    return Err(Error::NodeOutOfRange { node, num_nodes });
                }
            }
            if a == b {
                self_edges += 1;
                continue;
            }
            adj[a].insert(b as u32);
            adj[b].insert(a as u32);
        }
        let num_classes = match &labels {
            Some(l) => {
                if l.len() != num_nodes {
                    return Err(Error::invalid(format!(
                        "label vector has {} entries, expected {num_nodes}",
                        l.len()
                    )));
                }
                l.iter().max().map_or(0, |m| m + 1)
            }
            None => 0,
        };
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        let mut neighbors = Vec::new();
        let mut degrees = Vec::with_capacity(num_nodes);
        offsets.push(0);
        for set in &adj {
            neighbors.extend(set.iter().copied());
            degrees.push(set.len());
            offsets.push(neighbors.len());
        }
        Ok((
            Graph {
                offsets,
                neighbors,
                degrees,
                features,
                labels,
                num_classes,
            },
            self_edges,
        ))
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn neighbor_slice(&self, node: usize) -> &[u32] {
        &self.neighbors[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        a < self.num_nodes()
            && b < self.num_nodes()
            && self.neighbor_slice(a).binary_search(&(b as u32)).is_ok()
    }

    /// Each undirected edge once, as `(low, high)`, in ascending order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for a in 0..self.num_nodes() {
            for &b in self.neighbor_slice(a) {
                if (b as usize) > a {
                    out.push((a, b as usize));
                }
            }
        }
        out
    }

    /// Mean degree `2M / N`.
    pub fn mean_degree(&self) -> f64 {
        if self.num_nodes() == 0 {
            0.0
        } else {
            self.neighbors.len() as f64 / self.num_nodes() as f64
        }
    }

    /// Same nodes, features and labels with a different edge set.
    pub fn with_edges(&self, edges: &[(usize, usize)]) -> Result<Graph> {
        let (mut g, _) = Graph::from_edges(
            self.num_nodes(),
            edges,
            Arc::clone(&self.features),
            self.labels.clone(),
        )?;
        g.num_classes = self.num_classes;
        Ok(g)
    }

    /// Applies a node relabeling: node `i` of `self` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.num_nodes();
        if perm.len() != n {
            return Err(Error::invalid("permutation length differs from node count"));
        }
        let edges: Vec<_> = self.edges().iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        let mut feats = Tensor::zeros(n, self.num_features());
        for (i, &p) in perm.iter().enumerate() {
            feats.row_mut(p).copy_from_slice(self.features.row(i));
        }
        let labels = self.labels.as_ref().map(|l| {
            let mut out = vec![0; n];
            for (i, &p) in perm.iter().enumerate() {
                out[p] = l[i];
            }
            out
        });
        let (mut g, _) = Graph::from_edges(n, &edges, feats, labels)?;
        g.num_classes = self.num_classes;
        Ok(g)
    }

    /// Overrides the class count (for label sets that do not use every class).
    pub fn set_num_classes(&mut self, num_classes: usize) {
        self.num_classes = num_classes;
    }

    /// Number of hops from `source` to every node (`usize::MAX` when unreachable).
    pub fn hop_distances(&self, source: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.num_nodes()];
        let mut queue = std::collections::VecDeque::new();
        dist[source] = 0;
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            for &v in self.neighbor_slice(u) {
                let v = v as usize;
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}

impl Topology for Graph {
    fn num_nodes(&self) -> usize {
        self.degrees.len()
    }

    fn degree(&self, node: usize) -> usize {
        self.degrees[node]
    }

    fn neighbors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.neighbor_slice(node).iter().map(|&n| n as usize)
    }

    fn features(&self) -> &Arc<Tensor> {
        &self.features
    }
}

/// `G` with one node and all its incident edges deleted, as a filter over
/// the base adjacency. The removed node stays addressable as an isolated
/// node so node ids keep their meaning.
#[derive(Debug, Clone, Copy)]
pub struct RemovalView<'a> {
    base: &'a Graph,
    removed: usize,
}

impl<'a> RemovalView<'a> {
    pub fn base(&self) -> &'a Graph {
        self.base
    }

    pub fn removed(&self) -> usize {
        self.removed
    }
}

pub fn remove_node(graph: &Graph, node: usize) -> Result<RemovalView<'_>> {
    if node >= graph.num_nodes() {
        return Err(Error::NodeOutOfRange {
            node,
            num_nodes: graph.num_nodes(),
        });
    }
    Ok(RemovalView {
        base: graph,
        removed: node,
    })
}

impl Topology for RemovalView<'_> {
    fn num_nodes(&self) -> usize {
        self.base.num_nodes()
    }

    fn degree(&self, node: usize) -> usize {
        if node == self.removed {
            0
        } else if self.base.has_edge(node, self.removed) {
            self.base.degree(node) - 1
        } else {
            self.base.degree(node)
        }
    }

    fn neighbors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        let slice: &[u32] = if node == self.removed {
            &[]
        } else {
            self.base.neighbor_slice(node)
        };
        let removed = self.removed;
        slice
            .iter()
            .map(|&n| n as usize)
            .filter(move |&n| n != removed)
    }

    fn features(&self) -> &Arc<Tensor> {
        self.base.features()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn plain(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::from_edges(n, edges, Tensor::zeros(n, 1), None).unwrap().0
    }

    #[test]
    fn triangle_degrees() {
        let g = plain(3, &[(0, 1), (1, 2), (2, 0)]);
        assert_eq!(g.degrees(), &[2, 2, 2]);
        assert_eq!(g.num_edges(), 3);
    }

    #[test]
    fn duplicates_and_self_edges_are_dropped() {
        let (g, dropped) = Graph::from_edges(
            3,
            &[(0, 1), (1, 0), (0, 1), (2, 2)],
            Tensor::zeros(3, 1),
            None,
        )
        .unwrap();
        assert_eq!(dropped, 1);
        assert_eq!(g.degrees(), &[1, 1, 0]);
    }

    #[test]
    fn out_of_range_edge_rejected() {
        let err = Graph::from_edges(2, &[(0, 2)], Tensor::zeros(2, 1), None).unwrap_err();
        assert!(matches!(err, Error::NodeOutOfRange { node: 2, .. }));
    }

    #[test]
    fn removal_on_path_disconnects() {
        let g = plain(3, &[(0, 1), (1, 2)]);
        let v = remove_node(&g, 1).unwrap();
        assert_eq!(v.neighbors(0).count(), 0);
        assert_eq!(v.neighbors(2).count(), 0);
        assert_eq!(v.degree(0), 0);
        assert_eq!(v.degree(1), 0);
        // base untouched
        assert_eq!(g.degrees(), &[1, 2, 1]);
    }

    #[test]
    fn removing_isolated_node_changes_nothing_else() {
        let g = plain(4, &[(0, 1), (1, 2)]);
        let v = remove_node(&g, 3).unwrap();
        for i in 0..3 {
            assert_eq!(v.degree(i), g.degree(i));
            assert!(v.neighbors(i).eq(g.neighbors(i)));
        }
    }

    #[test]
    fn removing_star_center_isolates_leaves() {
        let g = plain(4, &[(0, 1), (0, 2), (0, 3)]);
        let v = remove_node(&g, 0).unwrap();
        for leaf in 1..4 {
            assert_eq!(v.degree(leaf), 0);
        }
        assert!(remove_node(&g, 4).is_err());
    }

    #[test]
    fn removal_hides_two_slots_per_incident_edge() {
        let g = plain(5, &[(0, 1), (0, 2), (1, 2), (2, 3), (3, 4)]);
        let base: usize = (0..5).map(|i| g.neighbors(i).count()).sum();
        for r in 0..5 {
            let v = remove_node(&g, r).unwrap();
            let seen: usize = (0..5).map(|i| v.neighbors(i).count()).sum();
            assert_eq!(base - seen, 2 * g.degree(r));
            for i in 0..5 {
                assert_eq!(v.degree(i), v.neighbors(i).count());
            }
        }
    }

    #[test]
    fn permutation_roundtrip() {
        let g = plain(4, &[(0, 1), (1, 2), (2, 3)]);
        let p = g.permuted(&[3, 2, 1, 0]).unwrap();
        assert!(p.has_edge(3, 2));
        assert!(p.has_edge(1, 0));
        assert!(!p.has_edge(0, 3));
    }
}
