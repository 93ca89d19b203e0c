//! Boundary-aware neighborhood sampling and offline pruning of the halo.
//!
//! Sampling rules for an L-layer model:
//! * roots (hop 0) are local training vertices;
//! * at hops 1..L-1 local and remote neighbors may be sampled, but a remote
//!   vertex is a leaf: its cached embedding is used and it is never expanded;
//! * at hop L only local neighbors are sampled, since remote raw features
//!   are never available.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};

use crate::error::{Error, Result};
use crate::graph::{NodeId, Split};
use crate::partition::PartitionedSubgraph;
use crate::seed::{self, stream};

/// Per-local-vertex cap on retained remote neighbors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Retention {
    Limit(usize),
    Unbounded,
}

impl Retention {
    pub fn allows(self, count: usize) -> usize {
        match self {
            Retention::Limit(i) => count.min(i),
            Retention::Unbounded => count,
        }
    }
}

impl fmt::Display for Retention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Retention::Limit(i) => write!(f, "{i}"),
            Retention::Unbounded => f.write_str("inf"),
        }
    }
}

impl FromStr for Retention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinity" | "unbounded" | "∞" => Ok(Retention::Unbounded),
            n => n
                .parse()
                .map(Retention::Limit)
                .map_err(|_| Error::param(format!("retention limit {s:?}"))),
        }
    }
}

/// Drops remote edges so that each local vertex keeps at most `retain`
/// remote neighbors, chosen uniformly at random. The choice for a vertex is a
/// prefix of a seeded permutation of its remote neighbors, so the retained
/// sets are nested across limits for a fixed seed. Halo vertices left without
/// an edge disappear from the pull set.
pub fn prune(sub: &PartitionedSubgraph, retain: Retention, seed: u64) -> PartitionedSubgraph {
    let Retention::Limit(limit) = retain else {
        return sub.clone();
    };
    let kept: Vec<Vec<u32>> = (0..sub.num_local() as u32)
        .map(|v| {
            let remotes = sub.remote_neighbors(v);
            if remotes.len() <= limit {
                return remotes.to_vec();
            }
            let mut order = remotes.to_vec();
            order.shuffle(&mut seed::rng(seed, &[stream::PRUNE, sub.global_id(v).0]));
            order.truncate(limit);
            order.sort_unstable();
            order
        })
        .collect();
    sub.filter_remote_edges(|v, r| kept[v as usize].binary_search(&r).is_ok())
}

/// Embeddings this client must fetch for a round: every halo vertex that
/// survived pruning.
pub fn required_pull_set(sub: &PartitionedSubgraph) -> Vec<NodeId> {
    sub.pull_nodes().to_vec()
}

/// Maximum sampled neighbors per destination; `hop(1)` is nearest the roots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fanout(Vec<usize>);

impl Fanout {
    pub fn new(per_hop: Vec<usize>) -> Result<Self> {
        if per_hop.is_empty() || per_hop.contains(&0) {
            return Err(Error::param("fanout entries must be >= 1"));
        }
        Ok(Fanout(per_hop))
    }

    /// Take every neighbor at each of `hops` hops.
    pub fn full(hops: usize) -> Self {
        Fanout(vec![usize::MAX; hops])
    }

    pub fn hops(&self) -> usize {
        self.0.len()
    }

    pub fn hop(&self, h: usize) -> usize {
        self.0[h - 1]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// One bipartite layer of a computation graph. `src[..dst.len()] == dst`, so
/// every destination also feeds its own self term.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub dst: Vec<u32>,
    pub src: Vec<u32>,
    pub src_remote: Vec<bool>,
    /// For a local source of block l >= 2: its row in block l-1's output.
    /// For a remote source: its halo slot (`index - num_local`).
    /// Unused for block 1, whose sources read raw features.
    pub src_slot: Vec<u32>,
    /// `agg_src[agg_offsets[i]..agg_offsets[i+1]]` are the source positions
    /// averaged into destination `i`: itself plus its sampled neighbors,
    /// ordered by ascending global ID.
    pub agg_offsets: Vec<usize>,
    pub agg_src: Vec<u32>,
}

impl Block {
    #[inline]
    pub fn members(&self, i: usize) -> &[u32] {
        &self.agg_src[self.agg_offsets[i]..self.agg_offsets[i + 1]]
    }

    /// Sampled (non-self) edges as `(source position, destination position)`.
    pub fn edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.dst.len()).flat_map(move |i| {
            self.members(i)
                .iter()
                .filter(move |&&p| p as usize != i)
                .map(move |&p| (p, i as u32))
        })
    }
}

/// Layered sampled neighborhood of a minibatch. `blocks[l-1]` is consumed by
/// model layer `l`: it maps hop `L-l+1` sources to hop `L-l` destinations.
/// Remote sources of block `l` read cached embeddings of layer `l-1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComputationGraph {
    pub blocks: Vec<Block>,
}

impl ComputationGraph {
    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Root vertices (subgraph indices), i.e. the last block's destinations.
    pub fn targets(&self) -> &[u32] {
        &self.blocks.last().expect("non-empty computation graph").dst
    }

    /// Cache layer required by remote sources of 1-based block `l`.
    pub fn cache_layer(l: usize) -> usize {
        l - 1
    }

    /// Number of remote source rows across all blocks.
    pub fn remote_sources(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.src_remote.iter().filter(|r| **r).count())
            .sum()
    }
}

pub fn sample_minibatch(
    sub: &PartitionedSubgraph,
    targets: &[u32],
    fanout: &Fanout,
    seed: u64,
) -> Result<ComputationGraph> {
    if targets.is_empty() {
        return Err(Error::param("empty minibatch"));
    }
    let layers = fanout.hops();
    let mut rng = seed::rng(seed, &[stream::SAMPLE]);
    const NONE: u32 = u32::MAX;
    let mut pos = vec![NONE; sub.num_vertices()];

    let mut dst: Vec<u32> = Vec::with_capacity(targets.len());
    for &t in targets {
        if sub.is_remote(t) || t as usize >= sub.num_local() || sub.split(t) != Split::Train {
            let id = if (t as usize) < sub.num_vertices() {
                sub.global_id(t).0
            } else {
                t as u64
            };
            return Err(Error::BadTarget(id));
        }
        if pos[t as usize] == NONE {
            pos[t as usize] = dst.len() as u32;
            dst.push(t);
        }
    }
    for &t in &dst {
        pos[t as usize] = NONE;
    }

    let mut blocks = Vec::with_capacity(layers);
    let mut chosen = Vec::new();
    for l in (1..=layers).rev() {
        let f = fanout.hop(layers - l + 1);
        let mut src = dst.clone();
        for (i, &d) in dst.iter().enumerate() {
            pos[d as usize] = i as u32;
        }
        let mut agg_offsets = Vec::with_capacity(dst.len() + 1);
        let mut agg_src = Vec::new();
        agg_offsets.push(0);
        for (i, &d) in dst.iter().enumerate() {
            let candidates = if l == 1 {
                sub.local_neighbors(d)
            } else {
                sub.neighbors(d)
            };
            chosen.clear();
            if f >= candidates.len() {
                chosen.extend_from_slice(candidates);
            } else {
                chosen.extend(
                    index::sample(&mut rng, candidates.len(), f)
                        .into_iter()
                        .map(|k| candidates[k]),
                );
            }
            let start = agg_src.len();
            agg_src.push(i as u32);
            for &u in &chosen {
                if pos[u as usize] == NONE {
                    pos[u as usize] = src.len() as u32;
                    src.push(u);
                }
                agg_src.push(pos[u as usize]);
            }
            agg_src[start..].sort_unstable_by_key(|&p| sub.global_id(src[p as usize]));
            agg_offsets.push(agg_src.len());
        }
        for &u in &src {
            pos[u as usize] = NONE;
        }
        let src_remote: Vec<bool> = src.iter().map(|&u| sub.is_remote(u)).collect();
        let mut next_local = 0u32;
        let src_slot = src
            .iter()
            .map(|&u| {
                if sub.is_remote(u) {
                    u - sub.num_local() as u32
                } else {
                    next_local += 1;
                    next_local - 1
                }
            })
            .collect();
        let next_dst = src.iter().copied().filter(|&u| !sub.is_remote(u)).collect();
        blocks.push(Block {
            dst,
            src,
            src_remote,
            src_slot,
            agg_offsets,
            agg_src,
        });
        dst = next_dst;
    }
    blocks.reverse();
    Ok(ComputationGraph { blocks })
}

/// A broken sampling rule found by [`audit`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RuleViolation {
    RootNotLocalTrain {
        node: NodeId,
    },
    RemoteAtFinalHop {
        node: NodeId,
    },
    RemoteDestination {
        block: usize,
        node: NodeId,
    },
    RemoteCacheLayer {
        block: usize,
        node: NodeId,
    },
    FanoutExceeded {
        block: usize,
        node: NodeId,
        sampled: usize,
        limit: usize,
    },
    NotANeighbor {
        block: usize,
        src: NodeId,
        dst: NodeId,
    },
    SelfTermMissing {
        block: usize,
        node: NodeId,
    },
}

/// Checks every sampling rule of a computation graph against its subgraph.
pub fn audit(
    sub: &PartitionedSubgraph,
    cg: &ComputationGraph,
    fanout: &Fanout,
) -> Vec<RuleViolation> {
    let mut out = Vec::new();
    let layers = cg.num_layers();
    let gid = |v: u32| sub.global_id(v);
    for &t in cg.targets() {
        if sub.is_remote(t) || sub.split(t) != Split::Train {
            out.push(RuleViolation::RootNotLocalTrain { node: gid(t) });
        }
    }
    for (bi, b) in cg.blocks.iter().enumerate() {
        let l = bi + 1;
        for (p, &u) in b.src.iter().enumerate() {
            if sub.is_remote(u) != b.src_remote[p] {
                out.push(RuleViolation::RemoteCacheLayer {
                    block: l,
                    node: gid(u),
                });
            }
            if sub.is_remote(u) {
                if l == 1 {
                    out.push(RuleViolation::RemoteAtFinalHop { node: gid(u) });
                }
                let layer = ComputationGraph::cache_layer(l);
                if layer < 1 || layer > layers - 1 {
                    out.push(RuleViolation::RemoteCacheLayer {
                        block: l,
                        node: gid(u),
                    });
                }
            }
        }
        for (i, &d) in b.dst.iter().enumerate() {
            if sub.is_remote(d) {
                out.push(RuleViolation::RemoteDestination {
                    block: l,
                    node: gid(d),
                });
            }
            let members = b.members(i);
            if !members.contains(&(i as u32)) || b.src[i] != d {
                out.push(RuleViolation::SelfTermMissing {
                    block: l,
                    node: gid(d),
                });
            }
            let sampled = members.len() - 1;
            let limit = fanout.hop(layers - l + 1);
            if sampled > limit {
                out.push(RuleViolation::FanoutExceeded {
                    block: l,
                    node: gid(d),
                    sampled,
                    limit,
                });
            }
        }
        for (p, i) in b.edges() {
            let (s, d) = (b.src[p as usize], b.dst[i as usize]);
            if sub.neighbors(d).binary_search(&s).is_err() {
                out.push(RuleViolation::NotANeighbor {
                    block: l,
                    src: gid(s),
                    dst: gid(d),
                });
            }
        }
    }
    out
}
