//! Vertex partitioning and construction of per-client halo subgraphs.

mod subgraph;

pub use subgraph::{
    build_subgraphs, load_manifest, load_subgraph, save_manifest, save_subgraph, CrossEdge,
    CrossEdgeManifest, PartitionedSubgraph,
};

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::seed::{self, stream};

/// Allowed overshoot of the largest part over the ideal `n / k`.
pub const BALANCE_SLACK: f64 = 1.05;

/// Owner client of every vertex.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionAssignment {
    parts: Vec<u32>,
    num_parts: usize,
}

impl PartitionAssignment {
    pub fn new(parts: Vec<u32>, num_parts: usize) -> Result<Self> {
        if num_parts == 0 || num_parts > parts.len().max(1) {
            return Err(Error::param(format!(
                "{num_parts} parts for {} vertices",
                parts.len()
            )));
        }
        let mut sizes = vec![0usize; num_parts];
        for (v, &p) in parts.iter().enumerate() {
            *sizes.get_mut(p as usize).ok_or_else(|| {
                Error::param(format!("vertex {v} assigned to part {p} >= {num_parts}"))
            })? += 1;
        }
        if let Some(p) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::param(format!("part {p} is empty")));
        }
        Ok(PartitionAssignment { parts, num_parts })
    }

    #[inline]
    pub fn part_of(&self, v: usize) -> usize {
        self.parts[v] as usize
    }

    pub fn num_parts(&self) -> usize {
        self.num_parts
    }

    pub fn parts(&self) -> &[u32] {
        &self.parts
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_parts];
        for &p in &self.parts {
            sizes[p as usize] += 1;
        }
        sizes
    }

    /// Directed edge entries whose endpoints lie in different parts.
    pub fn cut_entries(&self, g: &Graph) -> usize {
        (0..g.num_nodes())
            .map(|u| {
                g.adj(u)
                    .iter()
                    .filter(|v| self.parts[v.index()] != self.parts[u])
                    .count()
            })
            .sum()
    }

    /// Fraction of vertices with at least one neighbor in another part.
    pub fn boundary_fraction(&self, g: &Graph) -> f64 {
        if g.num_nodes() == 0 {
            return 0.0;
        }
        let boundary = (0..g.num_nodes())
            .filter(|&u| {
                g.adj(u)
                    .iter()
                    .any(|v| self.parts[v.index()] != self.parts[u])
            })
            .count();
        boundary as f64 / g.num_nodes() as f64
    }

    /// Reads a partition file: one part index per line, one line per vertex.
    pub fn read(path: impl AsRef<Path>, num_nodes: usize, num_parts: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        let parts = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(i, l)| {
                l.parse::<u32>()
                    .map_err(|_| Error::format(format!("partition line {}: {l:?}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if parts.len() != num_nodes {
            return Err(Error::format(format!(
                "partition file has {} lines for {num_nodes} vertices",
                parts.len()
            )));
        }
        PartitionAssignment::new(parts, num_parts)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let text: String = self.parts.iter().map(|p| format!("{p}\n")).collect();
        Ok(fs::write(path, text)?)
    }
}

/// Seeded greedy partitioner: grows each part breadth-first from a random
/// unassigned start until it reaches its share of the vertices, then runs a
/// few passes of balance-constrained boundary refinement.
pub fn partition(g: &Graph, k: usize, seed: u64) -> Result<PartitionAssignment> {
    let n = g.num_nodes();
    if k == 0 || k > n {
        return Err(Error::param(format!("k = {k} outside [1, {n}]")));
    }
    let cap = (BALANCE_SLACK * n as f64 / k as f64).ceil() as usize;
    let mut rng = seed::rng(seed, &[stream::PARTITION]);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    const UNASSIGNED: u32 = u32::MAX;
    let mut parts = vec![UNASSIGNED; n];
    let mut next_start = 0;
    let mut remaining = n;
    let mut queue = VecDeque::new();
    for p in 0..k {
        let target = remaining.div_ceil(k - p);
        let mut size = 0;
        queue.clear();
        while size < target {
            let u = match queue.pop_front() {
                Some(u) => u,
                None => {
                    while parts[order[next_start]] != UNASSIGNED {
                        next_start += 1;
                    }
                    order[next_start]
                }
            };
            if parts[u] != UNASSIGNED {
                continue;
            }
            parts[u] = p as u32;
            size += 1;
            queue.extend(
                g.adj(u)
                    .iter()
                    .map(|v| v.index())
                    .filter(|&v| parts[v] == UNASSIGNED),
            );
        }
        remaining -= size;
    }

    let mut sizes = vec![0usize; k];
    for &p in &parts {
        sizes[p as usize] += 1;
    }
    let mut counts = vec![0usize; k];
    for _pass in 0..4 {
        let mut moved = false;
        order.shuffle(&mut rng);
        for &v in &order {
            let from = parts[v] as usize;
            if sizes[from] <= 1 {
                continue;
            }
            counts.iter_mut().for_each(|c| *c = 0);
            for u in g.adj(v) {
                counts[parts[u.index()] as usize] += 1;
            }
            let best = (0..k)
                .filter(|&q| q != from && sizes[q] < cap && counts[q] > counts[from])
                .max_by_key(|&q| (counts[q], std::cmp::Reverse(q)));
            if let Some(to) = best {
                parts[v] = to as u32;
                sizes[from] -= 1;
                sizes[to] += 1;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    PartitionAssignment::new(parts, k)
}
