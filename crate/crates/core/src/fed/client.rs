//! Client runtime: pre-training, then per round pull, local epochs and push.

use std::thread;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;

use super::{AggregationClient, RoundPlan};
use crate::error::{Error, Result};
use crate::gnn::{
    layerwise_inference, loss_and_grad, AdamConfig, AdamState, ModelParams, RemoteCache,
};
use crate::partition::PartitionedSubgraph;
use crate::sampler::{prune, sample_minibatch};
use crate::seed::{self, stream};
use crate::store::EmbeddingClient;
use crate::wire::{EmbeddingKey, EmbeddingRecord, PhaseTimings};

/// What a client did in one round. Round 0 is pre-training.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientReport {
    pub client: u32,
    pub round: u32,
    pub params: ModelParams<f32>,
    pub num_train_samples: u64,
    pub timings: PhaseTimings,
    pub pulled_keys: u64,
    pub pushed_keys: u64,
    /// Mean minibatch loss over the round's last epoch.
    pub loss: f64,
}

/// Network endpoints of one client. `pusher` is a second embedding
/// connection used by the overlapped push worker.
pub struct Connections {
    pub aggregation: Box<dyn AggregationClient>,
    pub embeddings: Option<Box<dyn EmbeddingClient>>,
    pub pusher: Option<Box<dyn EmbeddingClient>>,
}

pub struct ClientRuntime {
    id: u32,
    sub: PartitionedSubgraph,
    train: Vec<u32>,
    plan: RoundPlan,
    seed: u64,
    adam: AdamConfig,
}

struct Trainer {
    params: ModelParams<f32>,
    adam: AdamState<f32>,
}

#[derive(Default)]
struct EpochStats {
    sample: Duration,
    train: Duration,
    loss: f64,
}

impl ClientRuntime {
    /// Prunes `sub` according to the plan; the pruned halo is fixed for the
    /// whole session.
    pub fn new(sub: &PartitionedSubgraph, plan: RoundPlan, seed: u64, adam: AdamConfig) -> Self {
        let sub = prune(sub, plan.retain, seed);
        ClientRuntime {
            id: sub.client_id() as u32,
            train: sub.train_nodes(),
            sub,
            plan,
            seed,
            adam,
        }
    }

    pub fn subgraph(&self) -> &PartitionedSubgraph {
        &self.sub
    }

    /// Runs the whole session and returns one report per round, starting with
    /// pre-training.
    pub fn run(&self, mut conns: Connections) -> Result<Vec<ClientReport>> {
        if self.plan.use_embeddings && conns.embeddings.is_none() {
            return Err(Error::param(
                "embedding mode without an embedding server connection",
            ));
        }
        let num_clients = conns.aggregation.register(self.id)?;
        if self.id >= num_clients {
            return Err(Error::param(format!("client {} of {num_clients}", self.id)));
        }
        if self.plan.use_embeddings {
            for emb in [&mut conns.embeddings, &mut conns.pusher]
                .into_iter()
                .flatten()
            {
                emb.hello(self.id)?;
            }
        }
        let initial = conns.aggregation.get_model(0)?;
        if self.plan.fanout.hops() != initial.num_layers() {
            return Err(Error::param(format!(
                "fanout has {} hops for a {}-layer model",
                self.plan.fanout.hops(),
                initial.num_layers()
            )));
        }
        let mut trainer = Trainer {
            adam: AdamState::new(&initial.dims(), self.adam),
            params: initial,
        };
        let mut reports = Vec::new();

        let t0 = Instant::now();
        let pushed = self.pretrain_round(&trainer.params, conns.embeddings.as_deref_mut())?;
        let elapsed = t0.elapsed().as_secs_f64();
        let timings = PhaseTimings {
            push_s: if self.plan.use_embeddings {
                elapsed
            } else {
                0.0
            },
            round_s: elapsed,
            ..PhaseTimings::default()
        };
        let mut more = conns.aggregation.put_model(
            0,
            self.train.len() as u64,
            trainer.params.clone(),
            timings,
        )?;
        reports.push(self.report(0, &trainer.params, timings, 0, pushed as u64, f64::NAN));

        let mut round = 1;
        while more {
            trainer.params = conns.aggregation.get_model(round)?;
            let report = self.run_round(round, &mut trainer, &mut conns)?;
            more = conns.aggregation.put_model(
                round,
                report.num_train_samples,
                trainer.params.clone(),
                report.timings,
            )?;
            reports.push(report);
            round += 1;
        }
        Ok(reports)
    }

    fn report(
        &self,
        round: u32,
        params: &ModelParams<f32>,
        timings: PhaseTimings,
        pulled: u64,
        pushed: u64,
        loss: f64,
    ) -> ClientReport {
        ClientReport {
            client: self.id,
            round,
            params: params.clone(),
            num_train_samples: self.train.len() as u64,
            timings,
            pulled_keys: pulled,
            pushed_keys: pushed,
            loss,
        }
    }

    /// Initializes the store with embeddings of every push node, computed
    /// from the initial model over local edges. No-op without embeddings.
    pub fn pretrain_round(
        &self,
        params: &ModelParams<f32>,
        emb: Option<&mut (dyn EmbeddingClient + 'static)>,
    ) -> Result<usize> {
        match emb {
            Some(emb) if self.plan.use_embeddings => push_embeddings(&self.sub, params, emb, 0),
            _ => Ok(0),
        }
    }

    /// Fetches `h^1..h^{L-1}` of every halo vertex into a fresh cache.
    fn pull(
        &self,
        params: &ModelParams<f32>,
        emb: &mut dyn EmbeddingClient,
    ) -> Result<(RemoteCache, u64)> {
        let layers = params.num_layers().saturating_sub(1);
        let dim = params.dims().get(1).copied().unwrap_or(0);
        let nl = self.sub.num_local();
        let mut cache = RemoteCache::new(self.sub.remote_nodes().len(), layers, dim);
        let keys: Vec<EmbeddingKey> = self
            .sub
            .pull_nodes()
            .iter()
            .flat_map(|&n| (1..=layers).map(move |l| EmbeddingKey::new(n, l)))
            .collect();
        if keys.is_empty() {
            return Ok((cache, 0));
        }
        for r in emb.batch_get(&keys)? {
            let idx = self.sub.index_of(r.key.node).ok_or_else(|| {
                Error::Protocol(format!("pulled embedding for unknown node {}", r.key.node))
            })?;
            cache.insert(idx as usize - nl, r.key.layer as usize, &r.vector)?;
        }
        Ok((cache, keys.len() as u64))
    }

    fn epoch(
        &self,
        trainer: &mut Trainer,
        cache: &RemoteCache,
        round: u32,
        epoch: usize,
    ) -> Result<EpochStats> {
        let mut stats = EpochStats::default();
        if self.train.is_empty() {
            return Ok(stats);
        }
        let c = self.id as u64;
        let mut order = self.train.clone();
        order.shuffle(&mut seed::rng(
            self.seed,
            &[stream::SHUFFLE, c, round as u64, epoch as u64],
        ));
        let mut batches = 0;
        for (b, batch) in order.chunks(self.plan.batch_size).enumerate() {
            let t = Instant::now();
            let s = seed::derive(
                self.seed,
                &[stream::SAMPLE, c, round as u64, epoch as u64, b as u64],
            );
            let cg = sample_minibatch(&self.sub, batch, &self.plan.fanout, s)?;
            let t_sampled = Instant::now();
            let (loss, grads) = loss_and_grad(&trainer.params, &cg, &self.sub, cache)?;
            trainer.adam.step(&mut trainer.params, &grads)?;
            stats.sample += t_sampled - t;
            stats.train += t_sampled.elapsed();
            stats.loss += loss as f64;
            batches += 1;
        }
        stats.loss /= batches as f64;
        Ok(stats)
    }

    fn run_round(
        &self,
        round: u32,
        trainer: &mut Trainer,
        conns: &mut Connections,
    ) -> Result<ClientReport> {
        let start = Instant::now();
        let mut timings = PhaseTimings::default();
        let (cache, pulled) = match conns.embeddings.as_deref_mut() {
            Some(emb) if self.plan.use_embeddings => {
                let pulled = self.pull(&trainer.params, emb)?;
                conns.aggregation.pull_done(round)?;
                pulled
            }
            _ => (RemoteCache::default(), 0),
        };
        if self.plan.use_embeddings {
            timings.pull_s = start.elapsed().as_secs_f64();
        }

        let epochs = self.plan.epochs;
        let overlap = self.plan.overlaps();
        let mut loss = f64::NAN;
        let mut add = |t: &mut PhaseTimings, s: EpochStats| {
            t.sample_s += s.sample.as_secs_f64();
            t.train_s += s.train.as_secs_f64();
            loss = s.loss;
        };
        let pushed;
        if overlap {
            for e in 0..epochs - 1 {
                add(&mut timings, self.epoch(trainer, &cache, round, e)?);
            }
            let snapshot = trainer.params.clone();
            let emb = match conns.pusher.as_deref_mut() {
                Some(p) => p,
                None => conns
                    .embeddings
                    .as_deref_mut()
                    .ok_or_else(|| Error::param("overlap push without a connection"))?,
            };
            let (last, waited, worker) = thread::scope(|s| {
                let worker = s.spawn(|| push_embeddings(&self.sub, &snapshot, emb, round));
                let last = self.epoch(trainer, &cache, round, epochs - 1);
                let t = Instant::now();
                let worker = worker.join().expect("push worker panicked");
                (last, t.elapsed(), worker)
            });
            add(&mut timings, last?);
            pushed = worker?;
            timings.push_s = waited.as_secs_f64();
        } else {
            for e in 0..epochs {
                add(&mut timings, self.epoch(trainer, &cache, round, e)?);
            }
            let t = Instant::now();
            pushed = match conns.embeddings.as_deref_mut() {
                Some(emb) if self.plan.use_embeddings => {
                    push_embeddings(&self.sub, &trainer.params, emb, round)?
                }
                _ => 0,
            };
            timings.push_s = if self.plan.use_embeddings {
                t.elapsed().as_secs_f64()
            } else {
                0.0
            };
        }
        timings.round_s = start.elapsed().as_secs_f64();
        Ok(self.report(round, &trainer.params, timings, pulled, pushed as u64, loss))
    }
}

/// Computes `h^1..h^{L-1}` over local edges and stores them for every push
/// node, stamped with `version`.
pub(crate) fn push_embeddings(
    sub: &PartitionedSubgraph,
    params: &ModelParams<f32>,
    emb: &mut dyn EmbeddingClient,
    version: u32,
) -> Result<usize> {
    let layers = params.num_layers().saturating_sub(1);
    if layers == 0 || sub.push_nodes().is_empty() {
        return Ok(0);
    }
    let hs = layerwise_inference(params, sub, layers)?;
    let mut records = Vec::with_capacity(sub.push_nodes().len() * layers);
    for &n in sub.push_nodes() {
        let v = sub
            .index_of(n)
            .ok_or_else(|| Error::format(format!("push node {n} is not local")))?;
        for (l, h) in hs.iter().enumerate() {
            records.push(EmbeddingRecord {
                key: EmbeddingKey::new(n, l + 1),
                version,
                vector: h.row(v as usize).to_vec(),
            });
        }
    }
    emb.batch_set(hs[0].cols(), records)
}
