//! Stochastic-block-model generator for desk-scale experiments.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Graph, Split};
use crate::error::{Error, Result};
use crate::seed::{self, stream, Rng};

/// Parameters of a planted-partition graph. Vertex `v` lives in block
/// `v / nodes_per_block` and carries label `block % num_classes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmSpec {
    pub blocks: usize,
    pub nodes_per_block: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Standard deviation of the per-class feature centroids.
    pub feature_signal: f32,
    /// Standard deviation of the per-node noise around the class centroid.
    pub feature_noise: f32,
    pub seed: u64,
}

impl Default for SbmSpec {
    fn default() -> Self {
        SbmSpec {
            blocks: 4,
            nodes_per_block: 250,
            p_intra: 0.05,
            p_inter: 0.005,
            feature_dim: 16,
            num_classes: 4,
            feature_signal: 1.0,
            feature_noise: 1.0,
            seed: 0,
        }
    }
}

impl SbmSpec {
    fn validate(&self) -> Result<usize> {
        for (name, p) in [("p_intra", self.p_intra), ("p_inter", self.p_inter)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::param(format!("{name} = {p} is not a probability")));
            }
        }
        if self.blocks == 0 || self.nodes_per_block == 0 || self.num_classes == 0 {
            return Err(Error::param(
                "blocks, nodes_per_block and num_classes must be >= 1",
            ));
        }
        if !(self.feature_signal >= 0.0 && self.feature_noise >= 0.0) {
            return Err(Error::param("feature scales must be non-negative"));
        }
        self.blocks
            .checked_mul(self.nodes_per_block)
            .filter(|&n| n <= u32::MAX as usize)
            .ok_or_else(|| Error::param("node count overflows"))
    }
}

/// Calls `hit(k)` for each index `k < count` that succeeds a Bernoulli(p)
/// trial, skipping geometrically between successes.
fn bernoulli_hits(rng: &mut Rng, count: usize, p: f64, mut hit: impl FnMut(usize)) {
    if count == 0 || p <= 0.0 {
        return;
    }
    if p >= 1.0 {
        (0..count).for_each(hit);
        return;
    }
    let log_q = (1.0 - p).ln();
    let mut k: i64 = -1;
    loop {
        let u: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
        k += 1 + (u.ln() / log_q).floor() as i64;
        if k as usize >= count {
            break;
        }
        hit(k as usize);
    }
}

pub fn synth_graph(spec: &SbmSpec) -> Result<Graph> {
    let n = spec.validate()?;
    let npb = spec.nodes_per_block;
    let block = |v: usize| v / npb;

    let mut rng = seed::rng(spec.seed, &[stream::SYNTH_EDGES]);
    let mut edges = Vec::new();
    for u in 0..n {
        let b = block(u);
        let block_end = (b + 1) * npb;
        bernoulli_hits(&mut rng, block_end - u - 1, spec.p_intra, |k| {
            edges.push((u as u64, (u + 1 + k) as u64))
        });
        bernoulli_hits(&mut rng, n - block_end, spec.p_inter, |k| {
            edges.push((u as u64, (block_end + k) as u64))
        });
    }

    let d = spec.feature_dim;
    let mut rng = seed::rng(spec.seed, &[stream::SYNTH_FEATURES]);
    let mut normal = || -> f32 { StandardNormal.sample(&mut rng) };
    let centroids: Vec<f32> = (0..spec.num_classes * d)
        .map(|_| spec.feature_signal * normal())
        .collect();
    let labels: Vec<u32> = (0..n)
        .map(|v| (block(v) % spec.num_classes) as u32)
        .collect();
    let mut features = Vec::with_capacity(n * d);
    for &label in &labels {
        let c = label as usize;
        for j in 0..d {
            features.push(centroids[c * d + j] + spec.feature_noise * normal());
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(spec.seed, &[stream::SYNTH_SPLIT]));
    let n_train = n * 6 / 10;
    let n_val = n * 2 / 10;
    let mut splits = vec![Split::None; n];
    for (rank, &v) in order.iter().enumerate() {
        splits[v] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    Graph::from_edges(n, &edges, d, spec.num_classes, features, labels, splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeId;

    fn spec(blocks: usize, npb: usize, p_intra: f64, p_inter: f64) -> SbmSpec {
        SbmSpec {
            blocks,
            nodes_per_block: npb,
            p_intra,
            p_inter,
            feature_dim: 3,
            num_classes: blocks,
            seed: 11,
            ..SbmSpec::default()
        }
    }

    #[test]
    fn degenerate_sbm_gives_disjoint_cliques() {
        let g = synth_graph(&spec(2, 100, 1.0, 0.0)).unwrap();
        assert_eq!(g.num_edges(), 2 * 100 * 99);
        for v in 0..200usize {
            let nbrs = g.neighbors(NodeId(v as u64)).unwrap();
            assert_eq!(nbrs.len(), 99);
            assert!(nbrs.iter().all(|u| u.index() / 100 == v / 100));
        }
    }

    #[test]
    fn zero_probabilities_give_no_edges() {
        let g = synth_graph(&spec(3, 10, 0.0, 0.0)).unwrap();
        assert_eq!(g.num_edges(), 0);
    }

    #[test]
    fn edge_count_matches_binomial_expectation() {
        let s = SbmSpec {
            seed: 7,
            ..spec(4, 500, 0.05, 0.01)
        };
        let g = synth_graph(&s).unwrap();
        // Independent oracle: sum of binomial means/variances over block pairs.
        let pairs_intra = 4.0 * (500.0 * 499.0 / 2.0);
        let pairs_inter = 6.0 * 500.0 * 500.0;
        let mean = pairs_intra * 0.05 + pairs_inter * 0.01;
        let var = pairs_intra * 0.05 * 0.95 + pairs_inter * 0.01 * 0.99;
        assert_eq!(mean, 39950.0);
        let undirected = (g.num_edges() / 2) as f64;
        assert!(
            (undirected - mean).abs() <= 5.0 * var.sqrt(),
            "{undirected} vs {mean} +- 5*{}",
            var.sqrt()
        );
    }

    #[test]
    fn generation_is_deterministic_in_seed() {
        let s = spec(3, 40, 0.2, 0.02);
        assert_eq!(synth_graph(&s).unwrap(), synth_graph(&s).unwrap());
        let other = SbmSpec {
            seed: 12,
            ..s.clone()
        };
        assert_ne!(synth_graph(&s).unwrap(), synth_graph(&other).unwrap());
    }

    #[test]
    fn split_is_sixty_twenty_twenty() {
        let g = synth_graph(&spec(2, 50, 0.1, 0.01)).unwrap();
        assert_eq!(g.nodes_in(Split::Train).count(), 60);
        assert_eq!(g.nodes_in(Split::Val).count(), 20);
        assert_eq!(g.nodes_in(Split::Test).count(), 20);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(synth_graph(&spec(2, 10, 1.5, 0.0)).is_err());
        assert!(synth_graph(&spec(2, 10, 0.5, -0.1)).is_err());
        assert!(synth_graph(&spec(0, 10, 0.5, 0.1)).is_err());
        assert!(synth_graph(&spec(usize::MAX, 2, 0.5, 0.1)).is_err());
    }
}
