//! The federated protocol: an aggregation server that sequences rounds,
//! averages client models and evaluates them, and a client runtime that
//! pre-trains, pulls halo embeddings, trains locally and pushes boundary
//! embeddings.

mod client;
mod orchestrate;

mod server;

pub use client::{ClientReport, ClientRuntime, Connections};

pub use orchestrate::{orchestrate, FedConfig, FedRun, Transport};
pub use server::{
    AggregationClient, AggregationServer, Evaluator, InProcAggregationClient, RoundObserver,
    TcpAggregationClient,
};

use std::fmt;
use std::str::FromStr;

use log::warn;

use crate::error::{Error, Result};
use crate::gnn::ModelParams;
use crate::sampler::{Fanout, Retention};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Purely local training; cross-client edges are ignored.
    Vanilla,
    /// Every halo embedding is pulled, push happens after training.
    Embc,
    /// Pruned halo and, optionally, push overlapped with the last epoch.
    Opes,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Vanilla => "vanilla",
            Mode::Embc => "embc",
            Mode::Opes => "opes",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vanilla" => Ok(Mode::Vanilla),
            "embc" => Ok(Mode::Embc),
            "opes" => Ok(Mode::Opes),
            other => Err(Error::param(format!("unknown mode {other:?}"))),
        }
    }
}

/// What a client does in each training round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub fanout: Fanout,
    pub use_embeddings: bool,
    pub retain: Retention,
    pub overlap_push: bool,
}

impl RoundPlan {
    /// Resolves mode flags. Vanilla ignores `retain` and `overlap`; EmbC
    /// retains everything and never overlaps.
    pub fn for_mode(
        mode: Mode,
        retain: Retention,
        overlap: bool,
        epochs: usize,
        batch_size: usize,
        fanout: Fanout,
    ) -> Result<Self> {
        if epochs == 0 {
            return Err(Error::param("epochs per round must be at least 1"));
        }
        if batch_size == 0 {
            return Err(Error::param("batch size must be at least 1"));
        }
        let (use_embeddings, retain, overlap_push) = match mode {
            Mode::Vanilla => (false, Retention::Limit(0), false),
            Mode::Embc => (true, Retention::Unbounded, false),
            Mode::Opes => (true, retain, overlap),
        };
        Ok(RoundPlan {
            epochs,
            batch_size,
            fanout,
            use_embeddings,
            retain,
            overlap_push,
        })
    }

    /// Whether the push actually overlaps; needs a second epoch to hide behind.
    pub fn overlaps(&self) -> bool {
        if self.overlap_push && self.epochs < 2 {
            warn!("overlapped push needs at least 2 epochs per round; pushing synchronously");
        }
        self.use_embeddings && self.overlap_push && self.epochs >= 2
    }
}

/// Test accuracy of the global model after a round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AccuracyPoint {
    pub round: u32,
    pub wall_clock_s: f64,
    pub test_accuracy: f64,
}

/// Server-side view of a run. Round 0 is the pre-training round and holds the
/// initial model.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalModelState {
    pub params: ModelParams<f32>,
    pub round: u32,
    pub history: Vec<AccuracyPoint>,
    /// Global parameters after each completed round, starting with round 0.
    pub param_history: Vec<ModelParams<f32>>,
}

impl GlobalModelState {
    pub fn peak_accuracy(&self) -> Option<f64> {
        self.history
            .iter()
            .map(|p| p.test_accuracy)
            .reduce(f64::max)
    }
}

/// Sample-weighted average of client models, accumulated in f64 in the order
/// given. Identical inputs come back unchanged.
pub fn fedavg(inputs: &[(u64, &ModelParams<f32>)]) -> Result<ModelParams<f32>> {
    let (_, first) = inputs
        .first()
        .ok_or_else(|| Error::param("fedavg needs at least one model"))?;
    if inputs.iter().any(|(_, p)| !p.same_shape(*first)) {
        return Err(Error::shape("fedavg: client models differ in shape"));
    }
    let total: u64 = inputs.iter().map(|(n, _)| n).sum();
    if total == 0 {
        return Err(Error::param(
            "fedavg: clients reported zero training samples",
        ));
    }
    let mut acc: ModelParams<f64> = ModelParams::zeros(&first.dims());
    for (n, p) in inputs {
        let w = *n as f64;
        for (a, t) in acc.tensors_mut().zip(p.tensors()) {
            for (x, &v) in a.iter_mut().zip(t) {
                *x += w * v as f64;
            }
        }
    }
    let total = total as f64;
    for a in acc.tensors_mut() {
        a.iter_mut().for_each(|x| *x /= total);
    }
    Ok(acc.cast())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::Matrix;

    fn scalar(v: f32) -> ModelParams<f32> {
        let mut p = ModelParams::zeros(&[1, 1]);
        p.layers[0].weight = Matrix::from_vec(1, 1, vec![v]);
        p
    }

    #[test]
    fn single_client_is_identity() {
        let p = ModelParams::glorot(&[5, 4, 3], 9);
        assert_eq!(fedavg(&[(7, &p)]).unwrap(), p);
    }

    #[test]
    fn weighted_mean_of_scalars() {
        let (a, b) = (scalar(1.0), scalar(3.0));
        let avg = fedavg(&[(1, &a), (3, &b)]).unwrap();
        assert_eq!(avg.layers[0].weight.as_slice(), &[2.5]);
    }

    #[test]
    fn identical_models_are_fixed_points() {
        let p = ModelParams::glorot(&[6, 8, 3], 2);
        let avg = fedavg(&[(3, &p), (11, &p), (5, &p), (1, &p)]).unwrap();
        assert_eq!(avg, p);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = ModelParams::glorot(&[2, 2], 0);
        let q = ModelParams::glorot(&[2, 3], 0);
        assert!(fedavg(&[]).is_err());
        assert!(matches!(fedavg(&[(1, &p), (1, &q)]), Err(Error::Shape(_))));
        assert!(fedavg(&[(0, &p), (0, &p)]).is_err());
    }

    #[test]
    fn mode_flags() {
        let f = Fanout::full(2);
        let v =
            RoundPlan::for_mode(Mode::Vanilla, Retention::Limit(4), true, 3, 8, f.clone()).unwrap();
        assert!(!v.use_embeddings && !v.overlaps() && v.retain == Retention::Limit(0));
        let e =
            RoundPlan::for_mode(Mode::Embc, Retention::Limit(4), true, 3, 8, f.clone()).unwrap();
        assert!(e.use_embeddings && !e.overlaps() && e.retain == Retention::Unbounded);
        let o =
            RoundPlan::for_mode(Mode::Opes, Retention::Limit(4), true, 1, 8, f.clone()).unwrap();
        assert!(!o.overlaps());
        assert!(RoundPlan::for_mode(Mode::Opes, Retention::Limit(4), true, 0, 8, f).is_err());
        assert_eq!("OpES".parse::<Mode>().unwrap(), Mode::Opes);
    }
}
