use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use opes_core::fed::{Mode, Transport};
use opes_core::graph::save_graph;
use opes_core::harness::{
    self, analyze_tta_at, client_rows, load_metrics, report_embedding_footprint, run_experiment,
    save_metrics, Dataset, RunConfig, Scope,
};
use opes_core::partition::{build_subgraphs, load_subgraph, save_manifest, save_subgraph};
use opes_core::sampler::Retention;

#[derive(Parser)]
#[command(
    name = "opes",
    version,
    about = "Federated GNN training with a boundary-embedding server"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a stochastic-block-model graph directory.
    Synth {
        #[command(flatten)]
        run: RunArgs,
        /// Directory to write the graph into.
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a graph into per-client subgraph directories and a cross-edge manifest.
    Partition {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment and write metrics.csv.
    Run {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare time-to-accuracy; the first file is the baseline.
    Tta {
        #[arg(required = true, num_args = 2..)]
        metrics: Vec<PathBuf>,
        /// Fixed target accuracy instead of the smallest peak minus 0.01.
        #[arg(long)]
        target: Option<f64>,
    },
    /// Embedding counts of one or more runs.
    Footprint {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
    /// Host the embedding and aggregation servers for multi-process runs.
    Serve {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "127.0.0.1:7700")]
        embed_addr: String,
        #[arg(long, default_value = "127.0.0.1:7701")]
        agg_addr: String,
    },
    /// Run one client process against `serve`.
    Client {
        #[command(flatten)]
        run: RunArgs,
        /// Subgraph directory written by `partition`.
        #[arg(long)]
        subgraph: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7700")]
        embed_addr: String,
        #[arg(long, default_value = "127.0.0.1:7701")]
        agg_addr: String,
    },
}

/// Configuration file plus per-field overrides.
#[derive(Args, Debug, Default)]
struct RunArgs {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Graph directory; omit for the synthetic generator.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    partition_file: Option<PathBuf>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    mode: Option<Mode>,
    /// Remote neighbors kept per vertex, or `inf`.
    #[arg(long)]
    retain: Option<Retention>,
    #[arg(long, conflicts_with = "no_overlap")]
    overlap: bool,
    #[arg(long)]
    no_overlap: bool,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Comma-separated neighbors per hop.
    #[arg(long)]
    fanout: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    transport: Option<Transport>,
    #[arg(long)]
    delay_ms: Option<f64>,
    #[arg(long)]
    output: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.dataset {
            cfg.dataset = Dataset::Path(d.clone());
        }
        if let Some(p) = &self.partition_file {
            cfg.partition_file = Some(p.clone());
        }
        macro_rules! take {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = &self.$field { cfg.$target = v.clone(); })*
            };
        }
        take!(clients => clients, mode => mode, retain => retain, layers => layers,
              hidden => hidden_dim, epochs => epochs, lr => lr, batch_size => batch_size,
              rounds => rounds, seed => seed, transport => transport, delay_ms => delay_ms,
              output => output);
        if self.overlap {
            cfg.overlap = true;
        }
        if self.no_overlap {
            cfg.overlap = false;
        }
        if let Some(f) = &self.fanout {
            cfg.set("fanout", f)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set {kv:?}: expected KEY=VALUE"))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn partition_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (g, pa) = harness::prepare(cfg)?;
    let (subs, manifest) = build_subgraphs(&g, &pa)?;
    fs::create_dir_all(out)?;
    for sub in &subs {
        save_subgraph(sub, out.join(format!("client{}", sub.client_id())))?;
    }
    save_manifest(&manifest, out.join("manifest.bin"))?;
    pa.write(out.join("parts.txt"))?;
    println!(
        "{} clients, sizes {:?}, cut {} of {} edge entries ({:.1}% boundary vertices)",
        pa.num_parts(),
        pa.sizes(),
        pa.cut_entries(&g),
        g.num_edges(),
        100.0 * pa.boundary_fraction(&g)
    );
    Ok(())
}

fn run_cmd(cfg: &RunConfig) -> Result<()> {
    let exp = run_experiment(cfg)?;
    let server: Vec<_> = exp
        .rows
        .iter()
        .filter(|r| r.scope == Scope::Server)
        .collect();
    let peak = server
        .iter()
        .filter_map(|r| r.test_accuracy)
        .fold(f64::NAN, f64::max);
    let round_times = server
        .iter()
        .filter(|r| r.round > 0)
        .map(|r| r.round_s)
        .collect();
    println!("metrics: {}", exp.metrics_path.display());
    println!("peak test accuracy: {peak:.4}");
    println!("median round time: {:.4} s", median(round_times));
    println!(
        "keys stored after pre-training: {}",
        exp.run.pretrain_stats.num_keys
    );
    Ok(())
}

fn tta_cmd(files: &[PathBuf], target: Option<f64>) -> Result<()> {
    let runs = files
        .iter()
        .map(|p| Ok((p.display().to_string(), load_metrics(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let r = analyze_tta_at(&runs, target)?;
    println!("nominal accuracy: {:.4}", r.nominal_accuracy);
    println!("{:<40} {:>8} {:>10} {:>8}", "run", "peak", "tta_s", "ratio");
    for (run, ratio) in r.runs.iter().zip(&r.ratios) {
        let tta = run.tta_s.map_or("unreached".into(), |t| format!("{t:.3}"));
        let ratio = ratio.map_or("-".into(), |x| format!("{x:.3}"));
        println!(
            "{:<40} {:>8.4} {:>10} {:>8}",
            run.name, run.peak_accuracy, tta, ratio
        );
    }
    Ok(())
}

fn footprint_cmd(files: &[PathBuf]) -> Result<()> {
    println!(
        "{:<40} {:>12} {:>14} {:>12}",
        "run", "stored_keys", "pulled_total", "pulled/round"
    );
    for p in files {
        let f = report_embedding_footprint(&load_metrics(p)?)?;
        let per_round = median(f.pulled_per_round.iter().map(|x| x.1 as f64).collect());
        println!(
            "{:<40} {:>12} {:>14} {:>12}",
            p.display(),
            f.keys_after_pretrain,
            f.total_pulled(),
            per_round
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth { run, out } => {
            let cfg = run.resolve()?;
            let Dataset::Synth(spec) = &cfg.dataset else {
                bail!("synth needs a synthetic dataset configuration");
            };
            let g = opes_core::graph::synth_graph(spec)?;
            save_graph(&g, &out)?;
            println!(
                "{} vertices, {} edge entries -> {}",
                g.num_nodes(),
                g.num_edges(),
                out.display()
            );
        }
        Command::Partition { run, out } => partition_cmd(&run.resolve()?, &out)?,
        Command::Run { run } => run_cmd(&run.resolve()?)?,
        Command::Tta { metrics, target } => tta_cmd(&metrics, target)?,
        Command::Footprint { metrics } => footprint_cmd(&metrics)?,
        Command::Serve {
            run,
            embed_addr,
            agg_addr,
        } => {
            let cfg = run.resolve()?;
            let rows = harness::serve(&cfg, &embed_addr, &agg_addr, |e, a| {
                info!("listening: embeddings {e}, aggregation {a}")
            })?;
            fs::create_dir_all(&cfg.output)?;
            let path = cfg.output.join("server_metrics.csv");
            save_metrics(&rows, &path)?;
            println!("metrics: {}", path.display());
        }
        Command::Client {
            run,
            subgraph,
            embed_addr,
            agg_addr,
        } => {
            let cfg = run.resolve()?;
            let sub = load_subgraph(&subgraph)?;
            let reports = harness::run_remote_client(&cfg, &sub, &embed_addr, &agg_addr)?;
            fs::create_dir_all(&cfg.output)?;
            let path = cfg
                .output
                .join(format!("client{}_metrics.csv", sub.client_id()));
            save_metrics(&client_rows(&reports), &path)?;
            println!("metrics: {}", path.display());
        }
    }
    Ok(())
}
