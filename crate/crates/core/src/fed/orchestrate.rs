//! Runs a whole federated session in one process, over either transport.

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use parking_lot::Mutex;

use super::client::{ClientReport, ClientRuntime, Connections};
use super::server::{
    AggregationClient, AggregationServer, InProcAggregationClient, RoundObserver,
    TcpAggregationClient,
};
use super::{GlobalModelState, RoundPlan};
use crate::error::{Error, Result};
use crate::gnn::{evaluate, AdamConfig, ModelParams};
use crate::graph::{Graph, Split};
use crate::net;
use crate::partition::{build_subgraphs, PartitionAssignment, PartitionedSubgraph};
use crate::store::{
    ClientOptions, EmbeddingClient, EmbeddingStore, InProcEmbeddingClient, TcpEmbeddingClient,
};
use crate::wire::{ErrorCode, PhaseTimings, StoreStats};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Transport {
    /// Direct calls; deterministic and fast.
    #[default]
    InProc,
    /// Loopback sockets through the wire protocol.
    Tcp,
}

impl std::str::FromStr for Transport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inproc" => Ok(Transport::InProc),
            "tcp" => Ok(Transport::Tcp),
            other => Err(Error::param(format!("unknown transport {other:?}"))),
        }
    }
}

impl std::fmt::Display for Transport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Transport::InProc => "inproc",
            Transport::Tcp => "tcp",
        })
    }
}

#[derive(Clone, Debug)]
pub struct FedConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub plan: RoundPlan,
    pub rounds: u32,
    pub lr: f64,
    pub seed: u64,
    pub transport: Transport,
    pub embedding_client: ClientOptions,
    pub timeout: Duration,
}

impl FedConfig {
    pub fn dims(&self, feature_dim: usize, num_classes: usize) -> Vec<usize> {
        let mut dims = vec![feature_dim];
        dims.extend(std::iter::repeat_n(self.hidden_dim, self.num_layers - 1));
        dims.push(num_classes);
        dims
    }

    fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::param("model needs at least one layer"));
        }
        if self.num_layers > 1 && self.hidden_dim == 0 {
            return Err(Error::param("hidden dimension must be positive"));
        }
        if self.plan.fanout.hops() != self.num_layers {
            return Err(Error::param(format!(
                "fanout has {} hops for {} layers",
                self.plan.fanout.hops(),
                self.num_layers
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }
}

pub struct FedRun {
    pub state: GlobalModelState,
    /// Per client, one report per round starting with pre-training.
    pub reports: Vec<Vec<ClientReport>>,
    pub store: Arc<EmbeddingStore>,
    /// Store contents right after pre-training.
    pub pretrain_stats: StoreStats,
    /// Timings as received by the server, per round then client.
    pub server_timings: Vec<Vec<PhaseTimings>>,
}

impl FedRun {
    /// Global parameters after round `r` (round 0 is the initial model).
    pub fn params_after(&self, r: usize) -> Option<&ModelParams<f32>> {
        self.state.param_history.get(r)
    }

    pub fn pulled_keys(&self) -> u64 {
        self.reports.iter().flatten().map(|r| r.pulled_keys).sum()
    }
}

/// Partitions `g`, starts both servers and one thread per client, and runs
/// pre-training plus `cfg.rounds` rounds. `observer` sees each global model
/// before clients leave the round barrier.
pub fn orchestrate(
    g: &Graph,
    pa: &PartitionAssignment,
    cfg: &FedConfig,
    observer: Option<RoundObserver>,
) -> Result<FedRun> {
    cfg.validate()?;
    let (subs, manifest) = build_subgraphs(g, pa)?;
    let dims = cfg.dims(g.feature_dim(), g.num_classes());
    let initial = ModelParams::glorot(&dims, cfg.seed);
    let store = Arc::new(EmbeddingStore::new(
        cfg.hidden_dim,
        cfg.num_layers,
        manifest,
    ));

    let whole = Arc::new(PartitionedSubgraph::whole(g));
    let pretrain_stats = Arc::new(Mutex::new(StoreStats::default()));
    let observer = {
        let store = store.clone();
        let pretrain_stats = pretrain_stats.clone();
        Box::new(move |round: u32, params: &ModelParams<f32>| {
            if round == 0 {
                *pretrain_stats.lock() = store.stats();
            }
            if let Some(obs) = &observer {
                obs(round, params);
            }
        })
    };
    let server = Arc::new(
        AggregationServer::new(subs.len(), cfg.rounds, initial)
            .with_timeout(cfg.timeout)
            .with_evaluator(Box::new(move |p| evaluate(p, &whole, Split::Test)))
            .with_observer(observer),
    );

    let servers = match cfg.transport {
        Transport::InProc => None,
        Transport::Tcp => Some((
            net::serve("127.0.0.1:0", store.clone())?,
            net::serve("127.0.0.1:0", server.clone())?,
        )),
    };
    let addrs = servers
        .as_ref()
        .map(|(s, a)| (s.local_addr(), a.local_addr()));

    let connect = |use_pusher: bool| -> Result<Connections> {
        let opts = cfg.embedding_client;
        let use_emb = cfg.plan.use_embeddings;
        Ok(match addrs {
            None => {
                let emb = || -> Box<dyn EmbeddingClient> {
                    Box::new(InProcEmbeddingClient::new(store.clone(), opts))
                };
                Connections {
                    aggregation: Box::new(InProcAggregationClient::new(server.clone())),
                    embeddings: use_emb.then(emb),
                    pusher: (use_emb && use_pusher).then(emb),
                }
            }
            Some((emb_addr, agg_addr)) => {
                let emb = || -> Result<Box<dyn EmbeddingClient>> {
                    Ok(Box::new(TcpEmbeddingClient::connect(emb_addr, opts)?))
                };
                let aggregation: Box<dyn AggregationClient> =
                    Box::new(TcpAggregationClient::connect(agg_addr)?);
                Connections {
                    aggregation,
                    embeddings: if use_emb { Some(emb()?) } else { None },
                    pusher: if use_emb && use_pusher {
                        Some(emb()?)
                    } else {
                        None
                    },
                }
            }
        })
    };

    let adam = AdamConfig::with_lr(cfg.lr);
    let results: Vec<Result<Vec<ClientReport>>> = thread::scope(|s| {
        let handles: Vec<_> = subs
            .iter()
            .map(|sub| {
                let runtime = ClientRuntime::new(sub, cfg.plan.clone(), cfg.seed, adam);
                let server = &server;
                let connect = &connect;
                s.spawn(move || {
                    let result =
                        connect(runtime_overlaps(&cfg.plan)).and_then(|conns| runtime.run(conns));
                    if let Err(e) = &result {
                        server.abort(format!("client {}: {e}", sub.client_id()));
                    }
                    result
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("client thread panicked"))
            .collect()
    });
    drop(servers);

    let mut reports = Vec::with_capacity(results.len());
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(rep) => reports.push(rep),
            Err(e) => errors.push(e),
        }
    }
    // Report the failure that caused the abort rather than its echoes.
    let is_echo = |e: &Error| {
        matches!(
            e,
            Error::Remote {
                code: ErrorCode::Aborted,
                ..
            }
        )
    };
    if let Some(i) = errors
        .iter()
        .position(|e| !is_echo(e))
        .or((!errors.is_empty()).then_some(0))
    {
        return Err(errors.swap_remove(i));
    }
    server.wait_finished()?;
    let pretrain_stats = *pretrain_stats.lock();
    Ok(FedRun {
        state: server.global_state(),
        reports,
        store,
        pretrain_stats,
        server_timings: server.reported_timings(),
    })
}

fn runtime_overlaps(plan: &RoundPlan) -> bool {
    plan.use_embeddings && plan.overlap_push && plan.epochs >= 2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fed::Mode;
    use crate::graph::{synth_graph, SbmSpec};
    use crate::partition::partition;
    use crate::sampler::{Fanout, Retention};

    fn setup() -> (Graph, PartitionAssignment) {
        let g = synth_graph(&SbmSpec {
            blocks: 2,
            nodes_per_block: 60,
            p_intra: 0.1,
            p_inter: 0.02,
            feature_dim: 8,
            num_classes: 2,
            seed: 3,
            ..SbmSpec::default()
        })
        .unwrap();
        let pa = partition(&g, 3, 1).unwrap();
        (g, pa)
    }

    fn config(mode: Mode, transport: Transport) -> FedConfig {
        FedConfig {
            num_layers: 3,
            hidden_dim: 8,
            plan: RoundPlan::for_mode(
                mode,
                Retention::Limit(2),
                true,
                2,
                16,
                Fanout::new(vec![4, 4, 4]).unwrap(),
            )
            .unwrap(),
            rounds: 3,
            lr: 0.01,
            seed: 5,
            transport,
            embedding_client: ClientOptions::default(),
            timeout: Duration::from_secs(60),
        }
    }

    #[test]
    fn transports_agree_bitwise() {
        let (g, pa) = setup();
        for mode in [Mode::Vanilla, Mode::Embc, Mode::Opes] {
            let a = orchestrate(&g, &pa, &config(mode, Transport::InProc), None).unwrap();
            let b = orchestrate(&g, &pa, &config(mode, Transport::Tcp), None).unwrap();
            assert_eq!(a.state.param_history, b.state.param_history, "{mode}");
            assert_eq!(a.state.param_history.len(), 4);
            assert_eq!(a.reports.len(), 3);
            assert!(a.reports.iter().all(|r| r.len() == 4));
            let accs: Vec<f64> = a.state.history.iter().map(|p| p.test_accuracy).collect();
            let accs_b: Vec<f64> = b.state.history.iter().map(|p| p.test_accuracy).collect();
            assert_eq!(accs, accs_b);
        }
    }

    #[test]
    fn vanilla_never_touches_the_store() {
        let (g, pa) = setup();
        let run = orchestrate(&g, &pa, &config(Mode::Vanilla, Transport::InProc), None).unwrap();
        assert_eq!(run.store.stats(), StoreStats::default());
        for r in run.reports.iter().flatten() {
            assert_eq!((r.pulled_keys, r.pushed_keys), (0, 0));
            assert_eq!((r.timings.pull_s, r.timings.push_s), (0.0, 0.0));
        }
    }

    #[test]
    fn bad_config_is_rejected() {
        let (g, pa) = setup();
        let mut cfg = config(Mode::Embc, Transport::InProc);
        cfg.num_layers = 2;
        assert!(matches!(
            orchestrate(&g, &pa, &cfg, None),
            Err(Error::InvalidParameter(_))
        ));
    }
}
