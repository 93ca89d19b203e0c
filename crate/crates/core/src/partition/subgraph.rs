//! A client's view of the graph: its own vertices plus a 1-hop halo of
//! remote vertices that are known by ID only.

use std::fs;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::PartitionAssignment;
use crate::error::{Error, Result};
use crate::graph::io::{
    meta_text, read_f32s, read_file, read_splits, read_u32s, read_u64s, read_u8s, write_f32s,
    write_splits, write_u32s, write_u64s, Meta,
};
use crate::graph::{Graph, NodeId, Split};

/// Subgraph vertices are addressed by a dense `u32` index. Local vertices
/// occupy `[0, num_local)` in ascending global-ID order; remote (halo)
/// vertices follow, also in ascending global-ID order. Only local vertices
/// carry features, labels and split masks.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedSubgraph {
    client_id: usize,
    nodes: Vec<NodeId>,
    num_local: usize,
    offsets: Vec<usize>,
    targets: Vec<u32>,
    feature_dim: usize,
    num_classes: usize,
    features: Vec<f32>,
    labels: Vec<u32>,
    splits: Vec<Split>,
    push_nodes: Vec<NodeId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CrossEdge {
    pub local: NodeId,
    pub remote: NodeId,
    pub owner: u32,
}

/// Every cross-client edge, grouped by the client that owns its local end.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CrossEdgeManifest {
    per_client: Vec<Vec<CrossEdge>>,
}

impl CrossEdgeManifest {
    pub fn new(per_client: Vec<Vec<CrossEdge>>) -> Self {
        CrossEdgeManifest { per_client }
    }

    pub fn num_clients(&self) -> usize {
        self.per_client.len()
    }

    pub fn for_client(&self, client: usize) -> Option<&[CrossEdge]> {
        self.per_client.get(client).map(Vec::as_slice)
    }

    pub fn is_symmetric(&self) -> bool {
        self.per_client.iter().enumerate().all(|(k, edges)| {
            edges.iter().all(|e| {
                self.for_client(e.owner as usize).is_some_and(|peer| {
                    peer.binary_search(&CrossEdge {
                        local: e.remote,
                        remote: e.local,
                        owner: k as u32,
                    })
                    .is_ok()
                })
            })
        })
    }

    pub fn total_entries(&self) -> usize {
        self.per_client.iter().map(Vec::len).sum()
    }
}

impl PartitionedSubgraph {
    /// The whole graph as a single client's subgraph with an empty halo.
    pub fn whole(g: &Graph) -> PartitionedSubgraph {
        let pa = PartitionAssignment {
            parts: vec![0; g.num_nodes()],
            num_parts: 1,
        };
        build_one(g, &pa, 0, &mut vec![u32::MAX; g.num_nodes()]).0
    }

    pub fn client_id(&self) -> usize {
        self.client_id
    }

    #[inline]
    pub fn num_local(&self) -> usize {
        self.num_local
    }

    #[inline]
    pub fn num_vertices(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.targets.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn local_nodes(&self) -> &[NodeId] {
        &self.nodes[..self.num_local]
    }

    pub fn remote_nodes(&self) -> &[NodeId] {
        &self.nodes[self.num_local..]
    }

    /// Remote vertices whose embeddings this client needs each round.
    pub fn pull_nodes(&self) -> &[NodeId] {
        self.remote_nodes()
    }

    /// Local vertices with a cross-client edge in the global graph.
    pub fn push_nodes(&self) -> &[NodeId] {
        &self.push_nodes
    }

    #[inline]
    pub fn is_remote(&self, v: u32) -> bool {
        v as usize >= self.num_local
    }

    #[inline]
    pub fn global_id(&self, v: u32) -> NodeId {
        self.nodes[v as usize]
    }

    #[inline]
    pub fn neighbors(&self, v: u32) -> &[u32] {
        &self.targets[self.offsets[v as usize]..self.offsets[v as usize + 1]]
    }

    /// Neighbors of `v` that are local to this client.
    #[inline]
    pub fn local_neighbors(&self, v: u32) -> &[u32] {
        let all = self.neighbors(v);
        let cut = all.partition_point(|&u| (u as usize) < self.num_local);
        &all[..cut]
    }

    #[inline]
    pub fn remote_neighbors(&self, v: u32) -> &[u32] {
        let all = self.neighbors(v);
        let cut = all.partition_point(|&u| (u as usize) < self.num_local);
        &all[cut..]
    }

    pub fn index_of(&self, id: NodeId) -> Option<u32> {
        if let Ok(i) = self.local_nodes().binary_search(&id) {
            return Some(i as u32);
        }
        self.remote_nodes()
            .binary_search(&id)
            .ok()
            .map(|i| (i + self.num_local) as u32)
    }

    #[inline]
    pub fn feature_row(&self, v: u32) -> &[f32] {
        let v = v as usize;
        debug_assert!(v < self.num_local);
        &self.features[v * self.feature_dim..(v + 1) * self.feature_dim]
    }

    pub fn label(&self, v: u32) -> Option<u32> {
        let l = *self.labels.get(v as usize)?;
        (l as usize != self.num_classes).then_some(l)
    }

    pub fn split(&self, v: u32) -> Split {
        self.splits.get(v as usize).copied().unwrap_or_default()
    }

    /// Local indices of training vertices, ascending.
    pub fn train_nodes(&self) -> Vec<u32> {
        (0..self.num_local as u32)
            .filter(|&v| self.splits[v as usize] == Split::Train)
            .collect()
    }

    pub fn num_train(&self) -> usize {
        self.splits.iter().filter(|s| **s == Split::Train).count()
    }

    /// Directed entries among local vertices only.
    pub fn local_edge_entries(&self) -> usize {
        (0..self.num_local as u32)
            .map(|v| self.local_neighbors(v).len())
            .sum()
    }

    /// Directed entries from local vertices to halo vertices.
    pub fn cross_edge_entries(&self) -> usize {
        (0..self.num_local as u32)
            .map(|v| self.remote_neighbors(v).len())
            .sum()
    }

    /// Checks the structural invariants; used on loaded and pruned subgraphs.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        if self.num_local > n || self.offsets.len() != n + 1 {
            return Err(Error::format("subgraph index arrays inconsistent"));
        }
        let sorted = |s: &[NodeId]| s.windows(2).all(|w| w[0] < w[1]);
        if !sorted(self.local_nodes()) || !sorted(self.remote_nodes()) || !sorted(&self.push_nodes)
        {
            return Err(Error::format(
                "subgraph node lists must be strictly ascending",
            ));
        }
        if self
            .remote_nodes()
            .iter()
            .any(|r| self.local_nodes().binary_search(r).is_ok())
        {
            return Err(Error::format("a vertex is both local and remote"));
        }
        if self
            .push_nodes
            .iter()
            .any(|p| self.local_nodes().binary_search(p).is_err())
        {
            return Err(Error::format("push node is not local"));
        }
        for v in 0..n as u32 {
            let nbrs = self.neighbors(v);
            if nbrs.windows(2).any(|w| w[0] >= w[1]) || nbrs.iter().any(|&u| u as usize >= n) {
                return Err(Error::format(format!("adjacency of {v} not canonical")));
            }
            for &u in nbrs {
                if self.neighbors(u).binary_search(&v).is_err() {
                    return Err(Error::Asymmetric(self.global_id(v).0, self.global_id(u).0));
                }
            }
            if self.is_remote(v) {
                if nbrs.is_empty() {
                    return Err(Error::format(format!(
                        "remote vertex {} has no local neighbor",
                        self.global_id(v)
                    )));
                }
                if nbrs.iter().any(|&u| self.is_remote(u)) {
                    return Err(Error::format("edge between two remote vertices"));
                }
            }
        }
        Ok(())
    }

    /// Rebuilds the subgraph keeping only the local->remote edges accepted by
    /// `keep`; halo vertices left without edges are dropped. Local-local edges
    /// and the push set are untouched.
    pub(crate) fn filter_remote_edges(&self, mut keep: impl FnMut(u32, u32) -> bool) -> Self {
        let nl = self.num_local;
        let mut kept: Vec<Vec<u32>> = (0..nl as u32)
            .map(|v| {
                self.remote_neighbors(v)
                    .iter()
                    .copied()
                    .filter(|&r| keep(v, r))
                    .collect()
            })
            .collect();
        let mut new_index = vec![u32::MAX; self.nodes.len() - nl];
        for list in &kept {
            for &r in list {
                new_index[r as usize - nl] = 0;
            }
        }
        let mut nodes = self.local_nodes().to_vec();
        for (slot, idx) in new_index.iter_mut().enumerate() {
            if *idx == 0 {
                *idx = nodes.len() as u32;
                nodes.push(self.nodes[nl + slot]);
            }
        }
        for list in &mut kept {
            for r in list.iter_mut() {
                *r = new_index[*r as usize - nl];
            }
        }
        let mut remote_adj: Vec<Vec<u32>> = vec![Vec::new(); nodes.len() - nl];
        for (v, list) in kept.iter().enumerate() {
            for &r in list {
                remote_adj[r as usize - nl].push(v as u32);
            }
        }
        let mut offsets = Vec::with_capacity(nodes.len() + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for (v, remotes) in kept.iter().enumerate() {
            targets.extend_from_slice(self.local_neighbors(v as u32));
            targets.extend_from_slice(remotes);
            offsets.push(targets.len());
        }
        for list in remote_adj {
            targets.extend_from_slice(&list);
            offsets.push(targets.len());
        }
        PartitionedSubgraph {
            nodes,
            offsets,
            targets,
            ..self.clone_without_topology()
        }
    }

    fn clone_without_topology(&self) -> Self {
        PartitionedSubgraph {
            client_id: self.client_id,
            nodes: Vec::new(),
            num_local: self.num_local,
            offsets: Vec::new(),
            targets: Vec::new(),
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
            features: self.features.clone(),
            labels: self.labels.clone(),
            splits: self.splits.clone(),
            push_nodes: self.push_nodes.clone(),
        }
    }
}

/// `index` is scratch space of length `num_nodes`, all `u32::MAX` on entry
/// and on return.
fn build_one(
    g: &Graph,
    pa: &PartitionAssignment,
    k: usize,
    index: &mut [u32],
) -> (PartitionedSubgraph, Vec<CrossEdge>) {
    let locals: Vec<NodeId> = (0..g.num_nodes())
        .filter(|&v| pa.part_of(v) == k)
        .map(NodeId::from)
        .collect();
    let mut remotes: Vec<NodeId> = locals
        .iter()
        .flat_map(|u| g.adj(u.index()).iter().copied())
        .filter(|v| pa.part_of(v.index()) != k)
        .collect();
    remotes.sort_unstable();
    remotes.dedup();

    let nodes: Vec<NodeId> = locals.iter().chain(&remotes).copied().collect();
    for (i, v) in nodes.iter().enumerate() {
        index[v.index()] = i as u32;
    }

    let mut offsets = Vec::with_capacity(nodes.len() + 1);
    let mut targets = Vec::new();
    let mut push_nodes = Vec::new();
    let mut cross = Vec::new();
    offsets.push(0);
    for &u in &locals {
        let start = targets.len();
        let mut is_push = false;
        for &v in g.adj(u.index()) {
            targets.push(index[v.index()]);
            let owner = pa.part_of(v.index());
            if owner != k {
                is_push = true;
                cross.push(CrossEdge {
                    local: u,
                    remote: v,
                    owner: owner as u32,
                });
            }
        }
        targets[start..].sort_unstable();
        if is_push {
            push_nodes.push(u);
        }
        offsets.push(targets.len());
    }
    for &r in &remotes {
        let start = targets.len();
        targets.extend(
            g.adj(r.index())
                .iter()
                .filter(|v| pa.part_of(v.index()) == k)
                .map(|v| index[v.index()]),
        );
        targets[start..].sort_unstable();
        offsets.push(targets.len());
    }
    for v in &nodes {
        index[v.index()] = u32::MAX;
    }

    let d = g.feature_dim();
    let mut features = Vec::with_capacity(locals.len() * d);
    for u in &locals {
        features.extend_from_slice(g.feature_row(u.index()));
    }
    let sub = PartitionedSubgraph {
        client_id: k,
        num_local: locals.len(),
        labels: locals.iter().map(|u| g.labels()[u.index()]).collect(),
        splits: locals.iter().map(|u| g.splits()[u.index()]).collect(),
        nodes,
        offsets,
        targets,
        feature_dim: d,
        num_classes: g.num_classes(),
        features,
        push_nodes,
    };
    cross.sort_unstable();
    (sub, cross)
}

pub fn build_subgraphs(
    g: &Graph,
    pa: &PartitionAssignment,
) -> Result<(Vec<PartitionedSubgraph>, CrossEdgeManifest)> {
    if pa.parts().len() != g.num_nodes() {
        return Err(Error::shape(format!(
            "assignment covers {} vertices, graph has {}",
            pa.parts().len(),
            g.num_nodes()
        )));
    }
    let mut index = vec![u32::MAX; g.num_nodes()];
    let (subs, per_client): (Vec<_>, Vec<_>) = (0..pa.num_parts())
        .map(|k| build_one(g, pa, k, &mut index))
        .unzip();
    Ok((subs, CrossEdgeManifest::new(per_client)))
}

pub fn save_subgraph(sub: &PartitionedSubgraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("meta.txt"),
        meta_text(&[
            ("num_nodes", sub.num_vertices()),
            ("num_edges", sub.num_edges()),
            ("feature_dim", sub.feature_dim),
            ("num_classes", sub.num_classes),
            ("num_local", sub.num_local),
            ("client_id", sub.client_id),
            ("num_push", sub.push_nodes.len()),
        ]),
    )?;
    write_u64s(
        dir.join("offsets.bin"),
        sub.offsets.iter().map(|&o| o as u64),
    )?;
    write_u64s(
        dir.join("targets.bin"),
        sub.targets.iter().map(|&t| t as u64),
    )?;
    write_f32s(dir.join("features.bin"), &sub.features)?;
    write_u32s(dir.join("labels.bin"), &sub.labels)?;
    write_splits(dir.join("masks.bin"), &sub.splits)?;
    let flags: Vec<u8> = (0..sub.num_vertices() as u32)
        .map(|v| sub.is_remote(v) as u8)
        .collect();
    fs::write(dir.join("remote.bin"), flags)?;
    write_u64s(dir.join("idmap.bin"), sub.nodes.iter().map(|v| v.0))?;
    write_u64s(dir.join("push.bin"), sub.push_nodes.iter().map(|v| v.0))
}

pub fn load_subgraph(dir: impl AsRef<Path>) -> Result<PartitionedSubgraph> {
    let dir = dir.as_ref();
    let meta = Meta::read(dir)?;
    let n = meta.usize("num_nodes")?;
    let m = meta.usize("num_edges")?;
    let d = meta.usize("feature_dim")?;
    let num_local = meta.usize("num_local")?;
    if num_local > n {
        return Err(Error::format("num_local exceeds num_nodes"));
    }
    let flags = read_u8s(dir, "remote.bin", n)?;
    if flags
        .iter()
        .enumerate()
        .any(|(v, &f)| f != (v >= num_local) as u8)
    {
        return Err(Error::format(
            "remote.bin flags do not match local/remote layout",
        ));
    }
    let offsets: Vec<usize> = read_u64s(dir, "offsets.bin", n + 1)?
        .into_iter()
        .map(|o| o as usize)
        .collect();
    if offsets[0] != 0 || offsets[n] != m || offsets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::format("offsets.bin is inconsistent"));
    }
    let targets = read_u64s(dir, "targets.bin", m)?
        .into_iter()
        .map(|t| u32::try_from(t).map_err(|_| Error::format("subgraph index overflows u32")))
        .collect::<Result<Vec<_>>>()?;
    let sub = PartitionedSubgraph {
        client_id: meta.usize("client_id")?,
        nodes: read_u64s(dir, "idmap.bin", n)?
            .into_iter()
            .map(NodeId)
            .collect(),
        num_local,
        offsets,
        targets,
        feature_dim: d,
        num_classes: meta.usize("num_classes")?,
        features: read_f32s(dir, "features.bin", num_local * d)?,
        labels: read_u32s(dir, "labels.bin", num_local)?,
        splits: read_splits(dir, num_local)?,
        push_nodes: read_u64s(dir, "push.bin", meta.usize("num_push")?)?
            .into_iter()
            .map(NodeId)
            .collect(),
    };
    sub.validate()?;
    Ok(sub)
}

/// `manifest.bin`: u32 client count, then per client a u64 entry count and
/// `(local: u64, remote: u64, owner: u32)` entries, little-endian.
pub fn save_manifest(manifest: &CrossEdgeManifest, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    buf.write_u32::<LittleEndian>(manifest.num_clients() as u32)?;
    for edges in &manifest.per_client {
        buf.write_u64::<LittleEndian>(edges.len() as u64)?;
        for e in edges {
            buf.write_u64::<LittleEndian>(e.local.0)?;
            buf.write_u64::<LittleEndian>(e.remote.0)?;
            buf.write_u32::<LittleEndian>(e.owner)?;
        }
    }
    Ok(fs::write(path, buf)?)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<CrossEdgeManifest> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::format("bad manifest path"))?;
    let bytes = read_file(dir, name)?;
    let mut cur = bytes.as_slice();
    let truncated = |_| Error::format("manifest.bin truncated");
    let k = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let mut per_client = Vec::with_capacity(k.min(1 << 16));
    for _ in 0..k {
        let count = cur.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        let mut edges = Vec::with_capacity(count.min(cur.len() / 20));
        for _ in 0..count {
            edges.push(CrossEdge {
                local: NodeId(cur.read_u64::<LittleEndian>().map_err(truncated)?),
                remote: NodeId(cur.read_u64::<LittleEndian>().map_err(truncated)?),
                owner: cur.read_u32::<LittleEndian>().map_err(truncated)?,
            });
        }
        per_client.push(edges);
    }
    if !cur.is_empty() {
        return Err(Error::format("trailing bytes in manifest.bin"));
    }
    Ok(CrossEdgeManifest::new(per_client))
}
