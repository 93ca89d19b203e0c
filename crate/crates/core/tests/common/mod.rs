//! Independent reference implementations used as test oracles.

#![allow(dead_code, clippy::needless_range_loop)]

use std::time::Duration;

use opes_core::fed::{FedConfig, Mode, RoundPlan, Transport};
use opes_core::gnn::{loss_and_grad, AdamConfig, AdamState, ModelParams, RemoteCache};
use opes_core::graph::{Graph, NodeId, SbmSpec, Split};
use opes_core::partition::{PartitionAssignment, PartitionedSubgraph};
use opes_core::sampler::{sample_minibatch, Fanout, Retention};
use opes_core::seed::{self, stream};
use opes_core::store::ClientOptions;
use rand::seq::SliceRandom;

/// Full-graph forward pass written from the definition: every layer averages
/// a vertex with all its neighbors, applies the affine map, and ReLU except
/// on the output layer. Returns the output of every layer.
pub fn naive_forward(g: &Graph, p: &ModelParams<f64>) -> Vec<Vec<Vec<f64>>> {
    let n = g.num_nodes();
    let mut h: Vec<Vec<f64>> = (0..n)
        .map(|v| g.feature_row(v).iter().map(|&x| x as f64).collect())
        .collect();
    let mut outs = Vec::new();
    for (l, layer) in p.layers.iter().enumerate() {
        let (d_in, d_out) = (layer.weight.rows(), layer.weight.cols());
        let mut next = vec![vec![0.0; d_out]; n];
        for v in 0..n {
            let nbrs = g.neighbors(NodeId(v as u64)).unwrap();
            let mut z = h[v].clone();
            for u in nbrs {
                for (a, b) in z.iter_mut().zip(&h[u.index()]) {
                    *a += b;
                }
            }
            let cnt = (nbrs.len() + 1) as f64;
            z.iter_mut().for_each(|x| *x /= cnt);
            for j in 0..d_out {
                let mut s = layer.bias[j];
                for i in 0..d_in {
                    s += z[i] * layer.weight.row(i)[j];
                }
                next[v][j] = if l + 1 < p.layers.len() {
                    s.max(0.0)
                } else {
                    s
                };
            }
        }
        outs.push(next.clone());
        h = next;
    }
    outs
}

/// Mean softmax cross-entropy of `targets` under [`naive_forward`].
pub fn naive_loss(g: &Graph, p: &ModelParams<f64>, targets: &[usize]) -> f64 {
    let logits = naive_forward(g, p).pop().unwrap();
    let mut total = 0.0;
    for &t in targets {
        let row = &logits[t];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[g.label(t).unwrap() as usize];
    }
    total / targets.len() as f64
}

/// Single-process minibatch trainer over the whole graph with full fanout:
/// no server, no store, no partitioning. Returns the parameters after each
/// round, starting with the initial model.
pub fn centralized_train(
    g: &Graph,
    dims: &[usize],
    seed: u64,
    lr: f64,
    epochs: usize,
    batch: usize,
    rounds: u32,
) -> Vec<ModelParams<f32>> {
    let sub = PartitionedSubgraph::whole(g);
    let fanout = Fanout::full(dims.len() - 1);
    let train: Vec<u32> = (0..g.num_nodes() as u32)
        .filter(|&v| g.splits()[v as usize] == Split::Train)
        .collect();
    let mut params = ModelParams::<f32>::glorot(dims, seed);
    let mut adam = AdamState::new(dims, AdamConfig::with_lr(lr));
    let mut history = vec![params.clone()];
    for r in 1..=rounds as u64 {
        for e in 0..epochs as u64 {
            let mut order = train.clone();
            order.shuffle(&mut seed::rng(seed, &[stream::SHUFFLE, 0, r, e]));
            for (b, chunk) in order.chunks(batch).enumerate() {
                let s = seed::derive(seed, &[stream::SAMPLE, 0, r, e, b as u64]);
                let cg = sample_minibatch(&sub, chunk, &fanout, s).unwrap();
                let (_, grads) =
                    loss_and_grad(&params, &cg, &sub, &RemoteCache::default()).unwrap();
                adam.step(&mut params, &grads).unwrap();
            }
        }
        history.push(params.clone());
    }
    history
}

pub fn round_robin(num_nodes: usize, k: usize) -> PartitionAssignment {
    PartitionAssignment::new((0..num_nodes).map(|v| (v % k) as u32).collect(), k).unwrap()
}

pub fn small_sbm(seed: u64) -> SbmSpec {
    SbmSpec {
        blocks: 3,
        nodes_per_block: 40,
        p_intra: 0.12,
        p_inter: 0.03,
        feature_dim: 6,
        num_classes: 3,
        seed,
        ..SbmSpec::default()
    }
}

#[derive(Clone)]
pub struct Cfg {
    pub mode: Mode,
    pub retain: Retention,
    pub overlap: bool,
    pub epochs: usize,
    pub batch: usize,
    pub fanout: Vec<usize>,
    pub rounds: u32,
    pub lr: f64,
    pub seed: u64,
    pub hidden: usize,
    pub transport: Transport,
    pub delay: Duration,
}

impl Default for Cfg {
    fn default() -> Self {
        Cfg {
            mode: Mode::Opes,
            retain: Retention::Limit(4),
            overlap: true,
            epochs: 3,
            batch: 64,
            fanout: vec![10, 10, 10],
            rounds: 30,
            lr: 0.001,
            seed: 0,
            hidden: 32,
            transport: Transport::InProc,
            delay: Duration::ZERO,
        }
    }
}

impl Cfg {
    pub fn build(&self) -> FedConfig {
        FedConfig {
            num_layers: self.fanout.len(),
            hidden_dim: self.hidden,
            plan: RoundPlan::for_mode(
                self.mode,
                self.retain,
                self.overlap,
                self.epochs,
                self.batch,
                Fanout::new(self.fanout.clone()).unwrap(),
            )
            .unwrap(),
            rounds: self.rounds,
            lr: self.lr,
            seed: self.seed,
            transport: self.transport,
            embedding_client: ClientOptions {
                delay: self.delay,
                ..ClientOptions::default()
            },
            timeout: Duration::from_secs(300),
        }
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
