//! Experiment driver: configuration, dataset preparation, metrics output and
//! post-hoc analysis.

mod config;
mod metrics;
mod remote;
mod tta;

pub use config::{Dataset, RunConfig};
pub use metrics::{
    load_metrics, read_metrics, rows_from_run, save_metrics, write_metrics, MetricsRow, Scope,
    COLUMNS,
};
pub use remote::{client_rows, run_remote_client, serve};
pub use tta::{analyze_tta, analyze_tta_at, RunTta, TtaResult, NOMINAL_MARGIN};

use std::fs;
use std::path::PathBuf;

use log::info;

use crate::error::{Error, Result};
use crate::fed::{orchestrate, FedRun};
use crate::graph::{load_graph, synth_graph, Graph};
use crate::partition::{partition, PartitionAssignment};

/// Loads or generates the graph and assigns vertices to clients.
pub fn prepare(cfg: &RunConfig) -> Result<(Graph, PartitionAssignment)> {
    let g = match &cfg.dataset {
        Dataset::Path(p) => load_graph(p)?,
        Dataset::Synth(spec) => synth_graph(spec)?,
    };
    let pa = match &cfg.partition_file {
        Some(p) => PartitionAssignment::read(p, g.num_nodes(), cfg.clients)?,
        None => partition(&g, cfg.clients, cfg.seed)?,
    };
    Ok((g, pa))
}

pub struct Experiment {
    pub metrics_path: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub run: FedRun,
}

/// Runs one configuration end to end and writes `metrics.csv` and the
/// resolved `config.txt` into the output directory.
pub fn run_experiment(cfg: &RunConfig) -> Result<Experiment> {
    let fed = cfg.fed_config()?;
    let (g, pa) = prepare(cfg)?;
    info!(
        "{} vertices, {} clients, cut {} of {} edge entries",
        g.num_nodes(),
        pa.num_parts(),
        pa.cut_entries(&g),
        g.num_edges()
    );
    let run = orchestrate(&g, &pa, &fed, None)?;
    let rows = rows_from_run(&run);
    fs::create_dir_all(&cfg.output)?;
    let metrics_path = cfg.output.join("metrics.csv");
    save_metrics(&rows, &metrics_path)?;
    fs::write(cfg.output.join("config.txt"), cfg.to_text())?;
    Ok(Experiment {
        metrics_path,
        rows,
        run,
    })
}

/// Embedding-server footprint of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Footprint {
    /// Distinct keys stored after pre-training.
    pub keys_after_pretrain: u64,
    /// Keys pulled by all clients, per training round.
    pub pulled_per_round: Vec<(u32, u64)>,
}

impl Footprint {
    pub fn total_pulled(&self) -> u64 {
        self.pulled_per_round.iter().map(|p| p.1).sum()
    }

    pub fn from_run(run: &FedRun) -> Footprint {
        let rows = rows_from_run(run);
        Footprint {
            keys_after_pretrain: run.pretrain_stats.num_keys,
            ..Self::pulled(&rows)
        }
    }

    fn pulled(rows: &[MetricsRow]) -> Footprint {
        let per_round = client_totals(rows, |r| r.pulled_keys);
        Footprint {
            keys_after_pretrain: 0,
            pulled_per_round: per_round.into_iter().filter(|p| p.0 > 0).collect(),
        }
    }
}

/// Sums a column over client rows per round. Files written by separate client
/// processes may be concatenated.
fn client_totals(rows: &[MetricsRow], col: fn(&MetricsRow) -> u64) -> Vec<(u32, u64)> {
    let mut totals = std::collections::BTreeMap::new();
    for r in rows.iter().filter(|r| matches!(r.scope, Scope::Client(_))) {
        *totals.entry(r.round).or_insert(0) += col(r);
    }
    totals.into_iter().collect()
}

/// Footprint from client metrics rows. Every push node has a single owner,
/// so the keys pushed in pre-training are all distinct.
pub fn report_embedding_footprint(rows: &[MetricsRow]) -> Result<Footprint> {
    let pushed = client_totals(rows, |r| r.pushed_keys);
    let pre = pushed
        .iter()
        .find(|p| p.0 == 0)
        .ok_or_else(|| Error::format("metrics have no pre-training client rows"))?;
    Ok(Footprint {
        keys_after_pretrain: pre.1,
        ..Footprint::pulled(rows)
    })
}
