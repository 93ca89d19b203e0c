//! One process per role: `serve` hosts the embedding and aggregation
//! servers, `run_remote_client` runs a single client against them.

use std::net::SocketAddr;
use std::sync::Arc;

use log::info;

use super::metrics::{MetricsRow, Scope};
use super::{prepare, RunConfig};
use crate::error::Result;
use crate::fed::{
    AggregationServer, ClientReport, ClientRuntime, Connections, TcpAggregationClient,
};
use crate::gnn::{evaluate, AdamConfig, ModelParams};
use crate::graph::Split;
use crate::net;
use crate::partition::{build_subgraphs, PartitionedSubgraph};
use crate::store::{EmbeddingClient, EmbeddingStore, TcpEmbeddingClient};

/// Binds both servers, then calls `ready` with their addresses and blocks
/// until the last round completes. Returns server metrics rows; pushed keys
/// come from the store's counters, pulled keys are only known to clients.
pub fn serve(
    cfg: &RunConfig,
    embed_addr: &str,
    agg_addr: &str,
    ready: impl FnOnce(SocketAddr, SocketAddr),
) -> Result<Vec<MetricsRow>> {
    let fed = cfg.fed_config()?;
    let (g, pa) = prepare(cfg)?;
    let (subs, manifest) = build_subgraphs(&g, &pa)?;
    let dims = fed.dims(g.feature_dim(), g.num_classes());
    let store = Arc::new(EmbeddingStore::new(
        fed.hidden_dim,
        fed.num_layers,
        manifest,
    ));
    let whole = Arc::new(PartitionedSubgraph::whole(&g));
    let server = Arc::new(
        AggregationServer::new(subs.len(), fed.rounds, ModelParams::glorot(&dims, fed.seed))
            .with_timeout(fed.timeout)
            .with_evaluator(Box::new(move |p| evaluate(p, &whole, Split::Test))),
    );
    let emb = net::serve(embed_addr, store.clone())?;
    let agg = net::serve(agg_addr, server.clone())?;
    info!(
        "embedding server on {}, aggregation server on {}",
        emb.local_addr(),
        agg.local_addr()
    );
    ready(emb.local_addr(), agg.local_addr());
    server.wait_finished()?;

    let state = server.global_state();
    let timings = server.reported_timings();
    let mut prev = 0.0;
    let rows = state
        .history
        .iter()
        .zip(&timings)
        .map(|(p, ts)| {
            let max =
                |f: fn(&crate::wire::PhaseTimings) -> f64| ts.iter().map(f).fold(0.0, f64::max);
            let row = MetricsRow {
                scope: Scope::Server,
                round: p.round,
                pull_s: max(|t| t.pull_s),
                sample_s: max(|t| t.sample_s),
                train_s: max(|t| t.train_s),
                push_s: max(|t| t.push_s),
                round_s: p.wall_clock_s - prev,
                test_accuracy: Some(p.test_accuracy),
                wall_clock_s: p.wall_clock_s,
                pulled_keys: 0,
                pushed_keys: (0..subs.len() as u32)
                    .map(|k| store.written_by(k, p.round))
                    .sum(),
            };
            prev = p.wall_clock_s;
            row
        })
        .collect();
    Ok(rows)
}

/// Runs one client over TCP. `sub` is the client's own subgraph as written
/// by the partitioning step.
pub fn run_remote_client(
    cfg: &RunConfig,
    sub: &PartitionedSubgraph,
    embed_addr: &str,
    agg_addr: &str,
) -> Result<Vec<ClientReport>> {
    let fed = cfg.fed_config()?;
    let runtime = ClientRuntime::new(sub, fed.plan.clone(), fed.seed, AdamConfig::with_lr(fed.lr));
    let emb = || -> Result<Box<dyn EmbeddingClient>> {
        Ok(Box::new(TcpEmbeddingClient::connect(
            embed_addr,
            fed.embedding_client,
        )?))
    };
    let use_emb = fed.plan.use_embeddings;
    let conns = Connections {
        aggregation: Box::new(TcpAggregationClient::connect(agg_addr)?),
        embeddings: if use_emb { Some(emb()?) } else { None },
        pusher: if use_emb && fed.plan.overlaps() {
            Some(emb()?)
        } else {
            None
        },
    };
    runtime.run(conns)
}

pub fn client_rows(reports: &[ClientReport]) -> Vec<MetricsRow> {
    reports
        .iter()
        .map(|c| MetricsRow {
            scope: Scope::Client(c.client),
            round: c.round,
            pull_s: c.timings.pull_s,
            sample_s: c.timings.sample_s,
            train_s: c.timings.train_s,
            push_s: c.timings.push_s,
            round_s: c.timings.round_s,
            test_accuracy: None,
            wall_clock_s: 0.0,
            pulled_keys: c.pulled_keys,
            pushed_keys: c.pushed_keys,
        })
        .collect()
}
