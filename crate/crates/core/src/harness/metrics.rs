//! Per-round metrics rows and their CSV form.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::fed::FedRun;

pub const COLUMNS: [&str; 11] = [
    "scope",
    "round",
    "pull_s",
    "sample_s",
    "train_s",
    "push_s",
    "round_s",
    "test_accuracy",
    "wall_clock_s",
    "pulled_keys",
    "pushed_keys",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scope {
    Server,
    Client(u32),
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Server => f.write_str("server"),
            Scope::Client(k) => write!(f, "client{k}"),
        }
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "server" {
            return Ok(Scope::Server);
        }
        s.strip_prefix("client")
            .and_then(|k| k.parse().ok())
            .map(Scope::Client)
            .ok_or_else(|| Error::format(format!("bad scope {s:?}")))
    }
}

impl Serialize for Scope {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Scope {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One row per (scope, round). Server rows carry the test accuracy, the
/// slowest client's phase times, the round's wall time and the key totals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scope: Scope,
    pub round: u32,
    pub pull_s: f64,
    pub sample_s: f64,
    pub train_s: f64,
    pub push_s: f64,
    pub round_s: f64,
    pub test_accuracy: Option<f64>,
    pub wall_clock_s: f64,
    pub pulled_keys: u64,
    pub pushed_keys: u64,
}

/// Flattens a finished run into rows, ordered by round with the server row
/// first.
pub fn rows_from_run(run: &FedRun) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    let mut prev_wall = 0.0;
    for point in &run.state.history {
        let r = point.round;
        let clients: Vec<_> = run
            .reports
            .iter()
            .filter_map(|reps| reps.iter().find(|rep| rep.round == r))
            .collect();
        let max = |f: fn(&crate::wire::PhaseTimings) -> f64| {
            clients.iter().map(|c| f(&c.timings)).fold(0.0, f64::max)
        };
        rows.push(MetricsRow {
            scope: Scope::Server,
            round: r,
            pull_s: max(|t| t.pull_s),
            sample_s: max(|t| t.sample_s),
            train_s: max(|t| t.train_s),
            push_s: max(|t| t.push_s),
            round_s: point.wall_clock_s - prev_wall,
            test_accuracy: Some(point.test_accuracy),
            wall_clock_s: point.wall_clock_s,
            pulled_keys: clients.iter().map(|c| c.pulled_keys).sum(),
            pushed_keys: clients.iter().map(|c| c.pushed_keys).sum(),
        });
        prev_wall = point.wall_clock_s;
        for c in clients {
            rows.push(MetricsRow {
                scope: Scope::Client(c.client),
                round: r,
                pull_s: c.timings.pull_s,
                sample_s: c.timings.sample_s,
                train_s: c.timings.train_s,
                push_s: c.timings.push_s,
                round_s: c.timings.round_s,
                test_accuracy: None,
                wall_clock_s: point.wall_clock_s,
                pulled_keys: c.pulled_keys,
                pushed_keys: c.pushed_keys,
            });
        }
    }
    rows
}

pub fn write_metrics(rows: &[MetricsRow], out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(COLUMNS).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(input: impl Read) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?;
    if header.iter().ne(COLUMNS) {
        return Err(Error::format(format!(
            "metrics header {:?} differs from {COLUMNS:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn save_metrics(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    write_metrics(rows, File::create(path)?)
}

pub fn load_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_owned()),
        _ => e.into(),
    })?;
    read_metrics(f)
}

fn csv_err(e: csv::Error) -> Error {
    Error::format(format!("metrics csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(scope: Scope, round: u32, acc: Option<f64>) -> MetricsRow {
        MetricsRow {
            scope,
            round,
            pull_s: 0.125,
            sample_s: 1e-9,
            train_s: 3.0,
            push_s: 0.0,
            round_s: 0.1 + 0.2,
            test_accuracy: acc,
            wall_clock_s: 12.5,
            pulled_keys: 7,
            pushed_keys: 0,
        }
    }

    #[test]
    fn header_and_empty_accuracy() {
        let mut buf = Vec::new();
        write_metrics(
            &[
                row(Scope::Server, 0, Some(0.5)),
                row(Scope::Client(3), 0, None),
            ],
            &mut buf,
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), COLUMNS.join(","));
        assert!(lines.next().unwrap().starts_with("server,0,"));
        assert!(lines.next().unwrap().starts_with("client3,0,"));
        assert!(text.contains(",,"));
    }

    #[test]
    fn wrong_header_is_rejected() {
        let text = "scope,round\nserver,0\n";
        assert!(read_metrics(text.as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn parse_emit_is_lossless(
            rows in prop::collection::vec(
                (any::<bool>(), 0u32..100, prop::array::uniform5(any::<f64>().prop_filter("finite", |x| x.is_finite())),
                 prop::option::of(0.0f64..=1.0), any::<u64>(), any::<u64>()),
                0..10)
        ) {
            let rows: Vec<MetricsRow> = rows
                .into_iter()
                .map(|(server, round, t, acc, pulled, pushed)| MetricsRow {
                    scope: if server { Scope::Server } else { Scope::Client(round % 4) },
                    round,
                    pull_s: t[0],
                    sample_s: t[1],
                    train_s: t[2],
                    push_s: t[3],
                    round_s: t[4],
                    test_accuracy: acc,
                    wall_clock_s: t[0].abs(),
                    pulled_keys: pulled,
                    pushed_keys: pushed,
                })
                .collect();
            let mut buf = Vec::new();
            write_metrics(&rows, &mut buf).unwrap();
            let back = read_metrics(buf.as_slice()).unwrap();
            prop_assert_eq!(&back, &rows);
            let mut again = Vec::new();
            write_metrics(&back, &mut again).unwrap();
            prop_assert_eq!(again, buf);
        }
    }
}
