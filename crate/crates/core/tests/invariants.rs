use proptest::prelude::*;

use opes_core::fed::fedavg;
use opes_core::gnn::ModelParams;
use opes_core::graph::{synth_graph, SbmSpec};
use opes_core::partition::{build_subgraphs, partition, PartitionedSubgraph};
use opes_core::sampler::{audit, prune, sample_minibatch, Fanout, Retention};

fn random_subgraphs(seed: u64, k: usize) -> Vec<PartitionedSubgraph> {
    let g = synth_graph(&SbmSpec {
        blocks: 3,
        nodes_per_block: 30,
        p_intra: 0.15,
        p_inter: 0.06,
        feature_dim: 3,
        num_classes: 3,
        seed,
        ..SbmSpec::default()
    })
    .unwrap();
    let pa = partition(&g, k, seed).unwrap();
    build_subgraphs(&g, &pa).unwrap().0
}

fn remote_ids(sub: &PartitionedSubgraph, v: u32) -> Vec<u64> {
    sub.remote_neighbors(v)
        .iter()
        .map(|&r| sub.global_id(r).0)
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partition_is_a_balanced_cover(seed in 0u64..1000, k in 1usize..5) {
        let subs = random_subgraphs(seed, k);
        let n: usize = subs.iter().map(|s| s.num_local()).sum();
        prop_assert_eq!(n, 90);
        let cap = (90.0 / k as f64 * 1.05).ceil() as usize;
        for s in &subs {
            prop_assert!(s.num_local() <= cap);
            prop_assert!(s.validate().is_ok());
        }
    }

    #[test]
    fn pruning_caps_and_nests(seed in 0u64..1000, prune_seed in 0u64..1000, i in 0usize..4) {
        let subs = random_subgraphs(seed, 3);
        for sub in &subs {
            let small = prune(sub, Retention::Limit(i), prune_seed);
            let big = prune(sub, Retention::Limit(i + 1), prune_seed);
            prop_assert!(small.pull_nodes().len() <= big.pull_nodes().len());
            prop_assert_eq!(small.local_edge_entries(), sub.local_edge_entries());
            for v in 0..sub.num_local() as u32 {
                let before = remote_ids(sub, v);
                let s = remote_ids(&small, v);
                let b = remote_ids(&big, v);
                prop_assert_eq!(s.len(), before.len().min(i));
                prop_assert!(s.iter().all(|x| b.contains(x)));
                prop_assert!(b.iter().all(|x| before.contains(x)));
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_rule_abiding(
        seed in 0u64..1000,
        sample_seed in any::<u64>(),
        layers in 1usize..4,
        f in 1usize..6,
    ) {
        let subs = random_subgraphs(seed, 2);
        let sub = &subs[0];
        let train = sub.train_nodes();
        prop_assume!(!train.is_empty());
        let batch = &train[..train.len().min(8)];
        let fanout = Fanout::new(vec![f; layers]).unwrap();
        let a = sample_minibatch(sub, batch, &fanout, sample_seed).unwrap();
        let b = sample_minibatch(sub, batch, &fanout, sample_seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(audit(sub, &a, &fanout).is_empty());
    }

    #[test]
    fn fedavg_of_identical_models_is_identity(
        seed in any::<u64>(),
        weights in prop::collection::vec(1u64..500, 1..6),
    ) {
        let p = ModelParams::<f32>::glorot(&[4, 5, 3], seed);
        let inputs: Vec<_> = weights.iter().map(|&w| (w, &p)).collect();
        prop_assert_eq!(fedavg(&inputs).unwrap(), p);
    }
}
