//! Three-client toy graph with a handful of cross-client edges.

use std::sync::Arc;

use opes_core::fed::{orchestrate, Mode, Transport};
use opes_core::graph::{Graph, NodeId, Split};
use opes_core::partition::{build_subgraphs, PartitionAssignment, PartitionedSubgraph};
use opes_core::sampler::{prune, required_pull_set, sample_minibatch, Fanout, Retention};
use opes_core::wire::EmbeddingKey;

mod common;
use common::Cfg;

// Client 0: A B C D, client 1: E F G I, client 2: H J K M.
const A: u64 = 0;
const B: u64 = 1;
const C: u64 = 2;
const D: u64 = 3;
const E: u64 = 4;
const F: u64 = 5;
const G: u64 = 6;
const I: u64 = 7;
const H: u64 = 8;
const J: u64 = 9;
const K: u64 = 10;
const M: u64 = 11;

fn toy() -> (Graph, PartitionAssignment) {
    let edges = [
        (A, B),
        (A, C),
        (A, D),
        (C, D),
        (E, F),
        (F, G),
        (G, I),
        (E, I),
        (H, J),
        (J, K),
        (K, M),
        (H, M),
        // cross-client
        (A, E),
        (B, F),
        (G, H),
    ];
    let n = 12;
    let features = (0..n * 2).map(|i| ((i * 7) % 5) as f32 * 0.25).collect();
    let labels = (0..n).map(|v| (v % 2) as u32).collect();
    let splits = (0..n)
        .map(|v| {
            if v % 4 == 3 {
                Split::Test
            } else {
                Split::Train
            }
        })
        .collect();
    let g = Graph::from_edges(n, &edges, 2, 2, features, labels, splits).unwrap();
    let pa = PartitionAssignment::new((0..n).map(|v| (v / 4) as u32).collect(), 3).unwrap();
    (g, pa)
}

fn ids(nodes: &[NodeId]) -> Vec<u64> {
    let mut v: Vec<u64> = nodes.iter().map(|n| n.0).collect();
    v.sort_unstable();
    v
}

fn subs() -> Vec<PartitionedSubgraph> {
    let (g, pa) = toy();
    build_subgraphs(&g, &pa).unwrap().0
}

#[test]
fn halo_push_and_pull_sets() {
    let s = subs();
    assert_eq!(ids(s[0].remote_nodes()), vec![E, F]);
    assert_eq!(ids(s[0].push_nodes()), vec![A, B]);
    assert_eq!(ids(s[1].push_nodes()), vec![E, F, G]);
    assert_eq!(ids(&required_pull_set(&s[1])), vec![A, B, H]);
    assert_eq!(ids(&required_pull_set(&s[2])), vec![G]);
    for sub in &s {
        sub.validate().unwrap();
    }
}

#[test]
fn pruning_to_zero_empties_the_halo() {
    let s = subs();
    let p0 = prune(&s[1], Retention::Limit(0), 5);
    assert!(required_pull_set(&p0).is_empty());
    assert_eq!(p0.local_edge_entries(), s[1].local_edge_entries());
    let pinf = prune(&s[1], Retention::Unbounded, 5);
    assert_eq!(ids(&required_pull_set(&pinf)), vec![A, B, H]);
}

#[test]
fn computation_graph_of_a() {
    let s = &subs()[0];
    let a = s.index_of(NodeId(A)).unwrap();
    let cg = sample_minibatch(s, &[a], &Fanout::full(2), 1).unwrap();
    let gid = |v: u32| s.global_id(v).0;

    // Block 2 maps hop-1 sources onto the root.
    let b2 = &cg.blocks[1];
    assert_eq!(b2.dst.iter().map(|&v| gid(v)).collect::<Vec<_>>(), vec![A]);
    let src2: Vec<(u64, bool)> = b2
        .src
        .iter()
        .zip(&b2.src_remote)
        .map(|(&v, &r)| (gid(v), r))
        .collect();
    for want in [(A, false), (B, false), (C, false), (D, false), (E, true)] {
        assert!(src2.contains(&want), "{want:?} missing from {src2:?}");
    }
    assert_eq!(src2.len(), 5);
    assert_eq!(opes_core::sampler::ComputationGraph::cache_layer(2), 1);

    // Block 1 expands only local hop-1 vertices, from local edges.
    let b1 = &cg.blocks[0];
    let dst1: Vec<u64> = b1.dst.iter().map(|&v| gid(v)).collect();
    assert!(!dst1.contains(&E));
    for v in [A, B, C, D] {
        assert!(dst1.contains(&v));
    }
    assert!(b1.src_remote.iter().all(|r| !r));
    assert!(b1.src.iter().all(|&v| gid(v) != F));
}

#[test]
fn pretraining_pushes_boundary_embeddings() {
    let (g, pa) = toy();
    let cfg = Cfg {
        mode: Mode::Embc,
        fanout: vec![usize::MAX; 2],
        rounds: 0,
        hidden: 4,
        batch: 4,
        epochs: 1,
        transport: Transport::InProc,
        ..Cfg::default()
    }
    .build();
    let run = orchestrate(&g, &pa, &cfg, None).unwrap();
    let pushed: Vec<u64> = run.reports.iter().map(|r| r[0].pushed_keys).collect();
    // One h^1 record per push node.
    assert_eq!(pushed, vec![2, 3, 1]);
    assert_eq!(run.pretrain_stats.num_keys, 6);
    assert_eq!(run.store.written_by(0, 0), 2);
    let store = Arc::clone(&run.store);
    let got = store
        .batch_get(&[
            EmbeddingKey::new(NodeId(A), 1),
            EmbeddingKey::new(NodeId(B), 1),
        ])
        .unwrap();
    assert!(got.iter().all(|r| r.version == 0 && r.vector.len() == 4));
    assert!(store.batch_get(&[EmbeddingKey::new(NodeId(C), 1)]).is_err());
}
