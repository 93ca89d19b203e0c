//! Immutable undirected graphs stored as symmetric CSR, plus per-node
//! features, labels and split masks.

pub(crate) mod io;
mod sbm;

pub use io::{load_graph, save_graph};
pub use sbm::{synth_graph, SbmSpec};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Global vertex identifier, shared by every client and server.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[repr(transparent)]
pub struct NodeId(pub u64);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<usize> for NodeId {
    fn from(v: usize) -> Self {
        NodeId(v as u64)
    }
}

/// Which evaluation split a vertex belongs to. A vertex belongs to at most one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Split {
    #[default]
    None = 0,
    Train = 1,
    Val = 2,
    Test = 3,
}

impl Split {
    pub fn from_byte(b: u8) -> Option<Split> {
        match b {
            0 => Some(Split::None),
            1 => Some(Split::Train),
            2 => Some(Split::Val),
            3 => Some(Split::Test),
            _ => None,
        }
    }

    /// Folds three boolean masks into per-node splits, rejecting overlaps.
    pub fn from_masks(train: &[bool], val: &[bool], test: &[bool]) -> Result<Vec<Split>> {
        if train.len() != val.len() || train.len() != test.len() {
            return Err(Error::shape("mask lengths differ"));
        }
        (0..train.len())
            .map(|v| match (train[v], val[v], test[v]) {
                (false, false, false) => Ok(Split::None),
                (true, false, false) => Ok(Split::Train),
                (false, true, false) => Ok(Split::Val),
                (false, false, true) => Ok(Split::Test),
                _ => Err(Error::MaskOverlap(v as u64)),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    offsets: Vec<u64>,
    targets: Vec<NodeId>,
    feature_dim: usize,
    num_classes: usize,
    features: Vec<f32>,
    labels: Vec<u32>,
    splits: Vec<Split>,
}

impl Graph {
    /// Builds a graph from raw CSR arrays, checking every structural invariant.
    /// Each adjacency list is sorted; self-loops and duplicate entries are rejected.
    pub fn from_csr(
        offsets: Vec<u64>,
        mut targets: Vec<NodeId>,
        feature_dim: usize,
        num_classes: usize,
        features: Vec<f32>,
        labels: Vec<u32>,
        splits: Vec<Split>,
    ) -> Result<Graph> {
        if offsets.is_empty() {
            return Err(Error::format("offsets must hold num_nodes + 1 entries"));
        }
        let n = offsets.len() - 1;
        if n > u32::MAX as usize {
            return Err(Error::format("more than 2^32 - 1 vertices"));
        }
        if offsets[0] != 0 {
            return Err(Error::format("offsets[0] must be 0"));
        }
        if offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::format("offsets are not non-decreasing"));
        }
        if offsets[n] != targets.len() as u64 {
            return Err(Error::format(format!(
                "offsets[num_nodes] = {} but there are {} edge entries",
                offsets[n],
                targets.len()
            )));
        }
        if features.len() != n * feature_dim {
            return Err(Error::format(format!(
                "features hold {} values, expected {n} x {feature_dim}",
                features.len()
            )));
        }
        if labels.len() != n || splits.len() != n {
            return Err(Error::format("labels/masks length differs from num_nodes"));
        }
        if let Some(v) = labels.iter().position(|&l| l as usize > num_classes) {
            return Err(Error::format(format!(
                "label {} of node {v} exceeds the unlabeled sentinel {num_classes}",
                labels[v]
            )));
        }
        for u in 0..n {
            let (lo, hi) = (offsets[u] as usize, offsets[u + 1] as usize);
            let list = &mut targets[lo..hi];
            if let Some(t) = list.iter().find(|t| t.index() >= n) {
                return Err(Error::NodeOutOfRange {
                    node: t.0,
                    num_nodes: n,
                });
            }
            list.sort_unstable();
            if list.iter().any(|t| t.index() == u) {
                return Err(Error::format(format!("self-loop on node {u}")));
            }
            if list.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::format(format!("duplicate edge entry on node {u}")));
            }
        }
        let g = Graph {
            offsets,
            targets,
            feature_dim,
            num_classes,
            features,
            labels,
            splits,
        };
        for u in 0..n {
            for &v in g.adj(u) {
                if g.adj(v.index()).binary_search(&NodeId(u as u64)).is_err() {
                    return Err(Error::Asymmetric(u as u64, v.0));
                }
            }
        }
        Ok(g)
    }

    /// Builds a graph from an undirected edge list; each pair is stored in both
    /// directions, duplicates and self-loops are dropped.
    pub fn from_edges(
        num_nodes: usize,
        edges: &[(u64, u64)],
        feature_dim: usize,
        num_classes: usize,
        features: Vec<f32>,
        labels: Vec<u32>,
        splits: Vec<Split>,
    ) -> Result<Graph> {
        let mut degree = vec![0u64; num_nodes];
        for &(u, v) in edges {
            for w in [u, v] {
                if w as usize >= num_nodes {
                    return Err(Error::NodeOutOfRange { node: w, num_nodes });
                }
            }
            if u != v {
                degree[u as usize] += 1;
                degree[v as usize] += 1;
            }
        }
        let mut lists: Vec<Vec<NodeId>> = degree
            .iter()
            .map(|&d| Vec::with_capacity(d as usize))
            .collect();
        for &(u, v) in edges {
            if u != v {
                lists[u as usize].push(NodeId(v));
                lists[v as usize].push(NodeId(u));
            }
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        offsets.push(0u64);
        let mut targets = Vec::new();
        for mut list in lists {
            list.sort_unstable();
            list.dedup();
            targets.extend_from_slice(&list);
            offsets.push(targets.len() as u64);
        }
        Graph::from_csr(
            offsets,
            targets,
            feature_dim,
            num_classes,
            features,
            labels,
            splits,
        )
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of directed edge entries (twice the undirected edge count).
    #[inline]
    pub fn num_edges(&self) -> usize {
        self.targets.len()
    }

    #[inline]
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    #[inline]
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// The label value reserved for unlabeled vertices.
    #[inline]
    pub fn unlabeled(&self) -> u32 {
        self.num_classes as u32
    }

    pub fn offsets(&self) -> &[u64] {
        &self.offsets
    }

    pub fn targets(&self) -> &[NodeId] {
        &self.targets
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn neighbors(&self, v: NodeId) -> Result<&[NodeId]> {
        if v.index() >= self.num_nodes() {
            return Err(Error::NodeOutOfRange {
                node: v.0,
                num_nodes: self.num_nodes(),
            });
        }
        Ok(self.adj(v.index()))
    }

    #[inline]
    pub(crate) fn adj(&self, v: usize) -> &[NodeId] {
        &self.targets[self.offsets[v] as usize..self.offsets[v + 1] as usize]
    }

    #[inline]
    pub fn feature_row(&self, v: usize) -> &[f32] {
        &self.features[v * self.feature_dim..(v + 1) * self.feature_dim]
    }

    pub fn label(&self, v: usize) -> Option<u32> {
        let l = self.labels[v];
        (l != self.unlabeled()).then_some(l)
    }

    pub fn nodes_in(&self, split: Split) -> impl Iterator<Item = NodeId> + '_ {
        self.splits
            .iter()
            .enumerate()
            .filter(move |(_, s)| **s == split)
            .map(|(v, _)| NodeId(v as u64))
    }

    pub fn mask(&self, split: Split) -> Vec<bool> {
        self.splits.iter().map(|s| *s == split).collect()
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Graph with unit features and every node unlabeled.
    pub fn bare(num_nodes: usize, edges: &[(u64, u64)]) -> Graph {
        Graph::from_edges(
            num_nodes,
            edges,
            1,
            1,
            vec![1.0; num_nodes],
            vec![1; num_nodes],
            vec![Split::None; num_nodes],
        )
        .unwrap()
    }

    pub fn path4() -> Graph {
        bare(4, &[(0, 1), (1, 2), (2, 3)])
    }

    pub fn clique(n: usize) -> Graph {
        let mut edges = Vec::new();
        for u in 0..n as u64 {
            for v in u + 1..n as u64 {
                edges.push((u, v));
            }
        }
        bare(n, &edges)
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    fn ids(v: &[u64]) -> Vec<NodeId> {
        v.iter().map(|&x| NodeId(x)).collect()
    }

    #[test]
    fn path_graph_has_two_entries_per_edge() {
        let g = path4();
        assert_eq!(g.num_nodes(), 4);
        assert_eq!(g.num_edges(), 6);
        assert_eq!(g.neighbors(NodeId(1)).unwrap(), ids(&[0, 2]).as_slice());
    }

    #[test]
    fn isolated_vertex_has_no_neighbors() {
        let g = bare(3, &[(0, 1)]);
        assert!(g.neighbors(NodeId(2)).unwrap().is_empty());
    }

    #[test]
    fn clique_neighbors_are_everyone_else() {
        let g = clique(4);
        assert_eq!(g.neighbors(NodeId(0)).unwrap(), ids(&[1, 2, 3]).as_slice());
        assert_eq!(g.num_edges(), 12);
    }

    #[test]
    fn out_of_range_neighbor_query_fails() {
        let g = path4();
        assert!(matches!(
            g.neighbors(NodeId(4)),
            Err(Error::NodeOutOfRange { node: 4, .. })
        ));
    }

    #[test]
    fn asymmetric_csr_is_rejected() {
        let n = 2;
        let err = Graph::from_csr(
            vec![0, 1, 1],
            ids(&[1]),
            0,
            1,
            vec![],
            vec![1; n],
            vec![Split::None; n],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Asymmetric(0, 1)));
    }

    #[test]
    fn overlapping_masks_are_rejected() {
        let err = Split::from_masks(&[true, false], &[true, false], &[false, false]).unwrap_err();
        assert!(matches!(err, Error::MaskOverlap(0)));
    }

    #[test]
    fn label_sentinel_marks_unlabeled() {
        let g = Graph::from_edges(2, &[(0, 1)], 0, 3, vec![], vec![2, 3], vec![Split::None; 2])
            .unwrap();
        assert_eq!(g.label(0), Some(2));
        assert_eq!(g.label(1), None);
        assert!(Graph::from_edges(1, &[], 0, 3, vec![], vec![4], vec![Split::None]).is_err());
    }
}
