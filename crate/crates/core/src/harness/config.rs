//! Flat `key = value` run configuration. `#` starts a comment.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::fed::{FedConfig, Mode, RoundPlan, Transport};
use crate::graph::SbmSpec;
use crate::sampler::{Fanout, Retention};
use crate::store::ClientOptions;

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    /// A graph directory in the on-disk format.
    Path(PathBuf),
    Synth(SbmSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: Dataset,
    /// Imported vertex-to-client assignment; the built-in partitioner runs
    /// when absent.
    pub partition_file: Option<PathBuf>,
    pub clients: usize,
    pub mode: Mode,
    pub retain: Retention,
    pub overlap: bool,
    pub layers: usize,
    pub hidden_dim: usize,
    pub fanout: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub rounds: u32,
    pub seed: u64,
    pub transport: Transport,
    /// Injected latency per embedding request frame, in milliseconds.
    pub delay_ms: f64,
    pub window: usize,
    pub timeout_s: f64,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: Dataset::Synth(SbmSpec::default()),
            partition_file: None,
            clients: 4,
            mode: Mode::Opes,
            retain: Retention::Limit(4),
            overlap: true,
            layers: 3,
            hidden_dim: 32,
            fanout: vec![10, 10, 10],
            epochs: 3,
            lr: 0.001,
            batch_size: 64,
            rounds: 30,
            seed: 0,
            transport: Transport::InProc,
            delay_ms: 0.0,
            window: 512,
            timeout_s: 600.0,
            output: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::param(format!("{key} = {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::param(format!("{key} = {value:?} is not a boolean"))),
    }
}

impl RunConfig {
    pub fn synth_mut(&mut self) -> &mut SbmSpec {
        if !matches!(self.dataset, Dataset::Synth(_)) {
            self.dataset = Dataset::Synth(SbmSpec::default());
        }
        match &mut self.dataset {
            Dataset::Synth(s) => s,
            Dataset::Path(_) => unreachable!(),
        }
    }

    /// Applies one setting; used for both file lines and CLI overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "dataset" => {
                self.dataset = if value == "synth" {
                    Dataset::Synth(SbmSpec::default())
                } else {
                    Dataset::Path(value.into())
                }
            }
            "synth.blocks" => self.synth_mut().blocks = parse(key, value)?,
            "synth.nodes_per_block" => self.synth_mut().nodes_per_block = parse(key, value)?,
            "synth.p_intra" => self.synth_mut().p_intra = parse(key, value)?,
            "synth.p_inter" => self.synth_mut().p_inter = parse(key, value)?,
            "synth.feature_dim" => self.synth_mut().feature_dim = parse(key, value)?,
            "synth.classes" => self.synth_mut().num_classes = parse(key, value)?,
            "synth.signal" => self.synth_mut().feature_signal = parse(key, value)?,
            "synth.noise" => self.synth_mut().feature_noise = parse(key, value)?,
            "synth.seed" => self.synth_mut().seed = parse(key, value)?,
            "partition_file" => {
                self.partition_file = (!value.is_empty() && value != "none").then(|| value.into())
            }
            "clients" => self.clients = parse(key, value)?,
            "mode" => self.mode = parse(key, value)?,
            "retain" => self.retain = parse(key, value)?,
            "overlap" => self.overlap = parse_bool(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "hidden" => self.hidden_dim = parse(key, value)?,
            "fanout" => {
                self.fanout = value
                    .split(',')
                    .map(|f| parse(key, f.trim()))
                    .collect::<Result<_>>()?
            }
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "rounds" => self.rounds = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "transport" => self.transport = parse(key, value)?,
            "delay_ms" => self.delay_ms = parse(key, value)?,
            "window" => self.window = parse(key, value)?,
            "timeout_s" => self.timeout_s = parse(key, value)?,
            "output" => self.output = value.into(),
            other => return Err(Error::param(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format(format!("config line {}: expected key = value", i + 1))
            })?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_owned()),
            _ => e.into(),
        })?;
        Self::parse_str(&text)
    }

    /// Canonical text form; `parse_str(to_text())` gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        match &self.dataset {
            Dataset::Path(p) => writeln!(s, "dataset = {}", p.display()).unwrap(),
            Dataset::Synth(spec) => {
                writeln!(s, "dataset = synth").unwrap();
                writeln!(s, "synth.blocks = {}", spec.blocks).unwrap();
                writeln!(s, "synth.nodes_per_block = {}", spec.nodes_per_block).unwrap();
                writeln!(s, "synth.p_intra = {}", spec.p_intra).unwrap();
                writeln!(s, "synth.p_inter = {}", spec.p_inter).unwrap();
                writeln!(s, "synth.feature_dim = {}", spec.feature_dim).unwrap();
                writeln!(s, "synth.classes = {}", spec.num_classes).unwrap();
                writeln!(s, "synth.signal = {}", spec.feature_signal).unwrap();
                writeln!(s, "synth.noise = {}", spec.feature_noise).unwrap();
                writeln!(s, "synth.seed = {}", spec.seed).unwrap();
            }
        }
        if let Some(p) = &self.partition_file {
            writeln!(s, "partition_file = {}", p.display()).unwrap();
        }
        let fanout: Vec<String> = self.fanout.iter().map(|f| f.to_string()).collect();
        for (k, v) in [
            ("clients", self.clients.to_string()),
            ("mode", self.mode.to_string()),
            ("retain", self.retain.to_string()),
            ("overlap", self.overlap.to_string()),
            ("layers", self.layers.to_string()),
            ("hidden", self.hidden_dim.to_string()),
            ("fanout", fanout.join(",")),
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("rounds", self.rounds.to_string()),
            ("seed", self.seed.to_string()),
            ("transport", self.transport.to_string()),
            ("delay_ms", self.delay_ms.to_string()),
            ("window", self.window.to_string()),
            ("timeout_s", self.timeout_s.to_string()),
            ("output", self.output.display().to_string()),
        ] {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::param("clients must be at least 1"));
        }
        if self.fanout.len() != self.layers {
            return Err(Error::param(format!(
                "fanout lists {} hops for {} layers",
                self.fanout.len(),
                self.layers
            )));
        }
        if !(self.delay_ms >= 0.0 && self.delay_ms.is_finite()) {
            return Err(Error::param(format!("delay_ms = {}", self.delay_ms)));
        }
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(Error::param(format!("timeout_s = {}", self.timeout_s)));
        }
        if self.window == 0 {
            return Err(Error::param("window must be at least 1"));
        }
        Ok(())
    }

    pub fn fed_config(&self) -> Result<FedConfig> {
        self.validate()?;
        Ok(FedConfig {
            num_layers: self.layers,
            hidden_dim: self.hidden_dim,
            plan: RoundPlan::for_mode(
                self.mode,
                self.retain,
                self.overlap,
                self.epochs,
                self.batch_size,
                Fanout::new(self.fanout.clone())?,
            )?,
            rounds: self.rounds,
            lr: self.lr,
            seed: self.seed,
            transport: self.transport,
            embedding_client: ClientOptions {
                window: self.window,
                delay: Duration::from_secs_f64(self.delay_ms / 1e3),
            },
            timeout: Duration::from_secs_f64(self.timeout_s),
        })
    }
}
