//! Aggregation server: round sequencing, barriers, FedAvg and evaluation.

use std::io::{BufReader, BufWriter, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::{info, warn};
use parking_lot::{Condvar, Mutex, MutexGuard};

use super::{fedavg, AccuracyPoint, GlobalModelState};
use crate::error::{Error, Result};
use crate::gnn::ModelParams;
use crate::net::Service;
use crate::wire::{
    read_frame, AggRequest, AggResponse, ErrorCode, Frame, PhaseTimings, ReadError, WireError,
};

/// Accuracy of a global model on the server-held test set.
pub type Evaluator = Box<dyn Fn(&ModelParams<f32>) -> Result<f64> + Send + Sync>;

/// Called once per completed round, before any client is released from the
/// round barrier.
pub type RoundObserver = Box<dyn Fn(u32, &ModelParams<f32>) + Send + Sync>;

struct Submission {
    n_samples: u64,
    params: ModelParams<f32>,
    timings: PhaseTimings,
}

struct State {
    registered: Vec<bool>,
    params: ModelParams<f32>,
    completed: Option<u32>,
    pull_round: u32,
    pulls: usize,
    pending: Vec<Option<Submission>>,
    history: Vec<AccuracyPoint>,
    param_history: Vec<ModelParams<f32>>,
    timings: Vec<Vec<PhaseTimings>>,
    abort: Option<String>,
}

impl State {
    fn current_round(&self) -> u32 {
        self.completed.map_or(0, |c| c + 1)
    }
}

pub struct AggregationServer {
    num_clients: usize,
    rounds: u32,
    timeout: Duration,
    evaluator: Option<Evaluator>,
    observer: Option<RoundObserver>,
    start: Instant,
    state: Mutex<State>,
    cv: Condvar,
}

impl AggregationServer {
    /// A server for `num_clients` clients and `rounds` training rounds after
    /// the pre-training round 0.
    pub fn new(num_clients: usize, rounds: u32, initial: ModelParams<f32>) -> Self {
        AggregationServer {
            num_clients,
            rounds,
            timeout: Duration::from_secs(600),
            evaluator: None,
            observer: None,
            start: Instant::now(),
            state: Mutex::new(State {
                registered: vec![false; num_clients],
                params: initial,
                completed: None,
                pull_round: 0,
                pulls: 0,
                pending: (0..num_clients).map(|_| None).collect(),
                history: Vec::new(),
                param_history: Vec::new(),
                timings: Vec::new(),
                abort: None,
            }),
            cv: Condvar::new(),
        }
    }

    pub fn with_evaluator(mut self, evaluator: Evaluator) -> Self {
        self.evaluator = Some(evaluator);
        self
    }

    pub fn with_observer(mut self, observer: RoundObserver) -> Self {
        self.observer = Some(observer);
        self
    }

    /// How long any client may wait at a barrier before the run is aborted.
    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    pub fn is_finished(&self) -> bool {
        self.state.lock().completed == Some(self.rounds)
    }

    /// Fails the run; every client blocked at a barrier gets an error.
    pub fn abort(&self, reason: impl Into<String>) {
        let mut st = self.state.lock();
        if st.abort.is_none() && st.completed != Some(self.rounds) {
            let reason = reason.into();
            warn!("aborting run: {reason}");
            st.abort = Some(reason);
        }
        self.cv.notify_all();
    }

    pub fn global_state(&self) -> GlobalModelState {
        let st = self.state.lock();
        GlobalModelState {
            params: st.params.clone(),
            round: st.completed.unwrap_or(0),
            history: st.history.clone(),
            param_history: st.param_history.clone(),
        }
    }

    /// Phase timings reported with each client's model, per round.
    pub fn reported_timings(&self) -> Vec<Vec<PhaseTimings>> {
        self.state.lock().timings.clone()
    }

    /// Blocks until the final round completes or the run aborts.
    pub fn wait_finished(&self) -> Result<()> {
        let mut st = self.state.lock();
        loop {
            if st.completed == Some(self.rounds) {
                return Ok(());
            }
            if let Some(reason) = &st.abort {
                return Err(Error::Aborted(reason.clone()));
            }
            self.cv.wait(&mut st);
        }
    }

    fn wait(
        &self,
        st: &mut MutexGuard<'_, State>,
        mut ready: impl FnMut(&State) -> bool,
    ) -> Result<(), WireError> {
        let deadline = Instant::now() + self.timeout;
        loop {
            if let Some(reason) = &st.abort {
                return Err(WireError::new(ErrorCode::Aborted, reason.clone()));
            }
            if ready(st) {
                return Ok(());
            }
            if self.cv.wait_until(st, deadline).timed_out() && !ready(st) {
                let reason = format!("barrier timed out after {:?}", self.timeout);
                st.abort = Some(reason.clone());
                self.cv.notify_all();
                return Err(WireError::new(ErrorCode::Aborted, reason));
            }
        }
    }

    fn finish_round(&self, st: &mut State, round: u32) -> Result<(), WireError> {
        let subs: Vec<Submission> = st.pending.iter_mut().map(|s| s.take().unwrap()).collect();
        if round > 0 {
            let inputs: Vec<_> = subs.iter().map(|s| (s.n_samples, &s.params)).collect();
            st.params = fedavg(&inputs)
                .map_err(|e| WireError::new(ErrorCode::DimensionMismatch, e.to_string()))?;
        }
        st.timings.push(subs.iter().map(|s| s.timings).collect());
        let acc = match &self.evaluator {
            Some(eval) => eval(&st.params)
                .map_err(|e| WireError::new(ErrorCode::Internal, format!("evaluation: {e}")))?,
            None => f64::NAN,
        };
        let wall = self.start.elapsed().as_secs_f64();
        info!("round {round}: test accuracy {acc:.4} at {wall:.3}s");
        st.history.push(AccuracyPoint {
            round,
            wall_clock_s: wall,
            test_accuracy: acc,
        });
        st.param_history.push(st.params.clone());
        if let Some(obs) = &self.observer {
            obs(round, &st.params);
        }
        st.completed = Some(round);
        Ok(())
    }

    fn registered(&self, session: &AggSession) -> Result<usize, WireError> {
        session
            .client
            .map(|c| c as usize)
            .ok_or_else(|| WireError::new(ErrorCode::NotRegistered, "REGISTER first"))
    }

    pub fn handle(&self, session: &mut AggSession, req: AggRequest) -> AggResponse {
        self.dispatch(session, req)
            .unwrap_or_else(AggResponse::Error)
    }

    fn dispatch(
        &self,
        session: &mut AggSession,
        req: AggRequest,
    ) -> Result<AggResponse, WireError> {
        match req {
            AggRequest::Register { client_id } => {
                let k = client_id as usize;
                if k >= self.num_clients {
                    return Err(WireError::new(
                        ErrorCode::UnknownClient,
                        format!("client {client_id} of {}", self.num_clients),
                    ));
                }
                let mut st = self.state.lock();
                if st.registered[k] {
                    return Err(WireError::new(
                        ErrorCode::UnknownClient,
                        format!("client {client_id} registered twice"),
                    ));
                }
                st.registered[k] = true;
                session.client = Some(client_id);
                Ok(AggResponse::Registered {
                    client_id,
                    num_clients: self.num_clients as u32,
                })
            }
            AggRequest::GetModel { round } => {
                self.registered(session)?;
                let mut st = self.state.lock();
                self.wait(&mut st, |s| s.current_round() >= round)?;
                if st.current_round() != round {
                    return Err(round_mismatch(round, st.current_round()));
                }
                Ok(AggResponse::Model {
                    round,
                    params: st.params.clone(),
                })
            }
            AggRequest::PullDone { round } => {
                self.registered(session)?;
                let mut st = self.state.lock();
                if round != st.current_round() || round == 0 {
                    return Err(round_mismatch(round, st.current_round()));
                }
                if st.pull_round != round {
                    st.pull_round = round;
                    st.pulls = 0;
                }
                st.pulls += 1;
                self.cv.notify_all();
                let k = self.num_clients;
                self.wait(&mut st, |s| {
                    s.pull_round > round || s.pulls >= k || s.completed >= Some(round)
                })?;
                Ok(AggResponse::PullsComplete { round })
            }
            AggRequest::PutModel {
                round,
                n_samples,
                params,
                timings,
            } => {
                let k = self.registered(session)?;
                let mut st = self.state.lock();
                if round != st.current_round() || round > self.rounds {
                    return Err(round_mismatch(round, st.current_round()));
                }
                if !params.same_shape(&st.params) {
                    return Err(WireError::new(
                        ErrorCode::DimensionMismatch,
                        "model shape differs from the global model",
                    ));
                }
                if st.pending[k].is_some() {
                    return Err(WireError::new(
                        ErrorCode::RoundMismatch,
                        format!("client {k} already submitted round {round}"),
                    ));
                }
                st.pending[k] = Some(Submission {
                    n_samples,
                    params,
                    timings,
                });
                if st.pending.iter().all(Option::is_some) {
                    if let Err(e) = self.finish_round(&mut st, round) {
                        st.abort = Some(e.message.clone());
                        self.cv.notify_all();
                        return Err(e);
                    }
                    self.cv.notify_all();
                }
                self.wait(&mut st, |s| s.completed >= Some(round))?;
                Ok(AggResponse::RoundDone {
                    round,
                    more: round < self.rounds,
                })
            }
        }
    }
}

fn round_mismatch(got: u32, expected: u32) -> WireError {
    WireError::new(
        ErrorCode::RoundMismatch,
        format!("request for round {got}, server is at round {expected}"),
    )
}

#[derive(Debug, Default)]
pub struct AggSession {
    client: Option<u32>,
}

impl Service for AggregationServer {
    type Session = AggSession;

    fn handle(&self, session: &mut AggSession, frame: Frame) -> Frame {
        match AggRequest::decode(&frame) {
            Ok(req) => AggregationServer::handle(self, session, req).encode(),
            Err(e) => Frame::error(&e),
        }
    }

    fn disconnected(&self, session: &mut AggSession) {
        if let Some(c) = session.client {
            self.abort(format!("client {c} disconnected"));
        }
    }
}

pub trait AggregationClient: Send {
    /// Returns the number of clients in the run.
    fn register(&mut self, client_id: u32) -> Result<u32>;

    fn get_model(&mut self, round: u32) -> Result<ModelParams<f32>>;

    /// Blocks until every client has finished pulling for `round`.
    fn pull_done(&mut self, round: u32) -> Result<()>;

    /// Submits the local model and blocks at the round barrier. Returns
    /// whether another round follows.
    fn put_model(
        &mut self,
        round: u32,
        n_samples: u64,
        params: ModelParams<f32>,
        timings: PhaseTimings,
    ) -> Result<bool>;
}

fn expect_registered(resp: AggResponse) -> Result<u32> {
    match resp {
        AggResponse::Registered { num_clients, .. } => Ok(num_clients),
        other => Err(unexpected(other)),
    }
}

fn expect_model(resp: AggResponse) -> Result<ModelParams<f32>> {
    match resp {
        AggResponse::Model { params, .. } => Ok(params),
        other => Err(unexpected(other)),
    }
}

fn expect_pulls(resp: AggResponse) -> Result<()> {
    match resp {
        AggResponse::PullsComplete { .. } => Ok(()),
        other => Err(unexpected(other)),
    }
}

fn expect_done(resp: AggResponse) -> Result<bool> {
    match resp {
        AggResponse::RoundDone { more, .. } => Ok(more),
        other => Err(unexpected(other)),
    }
}

fn unexpected(resp: AggResponse) -> Error {
    match resp {
        AggResponse::Error(e) => e.into(),
        other => Error::Protocol(format!("unexpected response {other:?}")),
    }
}

pub struct InProcAggregationClient {
    server: Arc<AggregationServer>,
    session: AggSession,
}

impl InProcAggregationClient {
    pub fn new(server: Arc<AggregationServer>) -> Self {
        InProcAggregationClient {
            server,
            session: AggSession::default(),
        }
    }

    fn call(&mut self, req: AggRequest) -> AggResponse {
        self.server.handle(&mut self.session, req)
    }
}

impl AggregationClient for InProcAggregationClient {
    fn register(&mut self, client_id: u32) -> Result<u32> {
        expect_registered(self.call(AggRequest::Register { client_id }))
    }

    fn get_model(&mut self, round: u32) -> Result<ModelParams<f32>> {
        expect_model(self.call(AggRequest::GetModel { round }))
    }

    fn pull_done(&mut self, round: u32) -> Result<()> {
        expect_pulls(self.call(AggRequest::PullDone { round }))
    }

    fn put_model(
        &mut self,
        round: u32,
        n_samples: u64,
        params: ModelParams<f32>,
        timings: PhaseTimings,
    ) -> Result<bool> {
        expect_done(self.call(AggRequest::PutModel {
            round,
            n_samples,
            params,
            timings,
        }))
    }
}

pub struct TcpAggregationClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpAggregationClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(TcpAggregationClient {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    fn call(&mut self, req: AggRequest) -> Result<AggResponse> {
        req.encode().write_to(&mut self.writer)?;
        self.writer.flush()?;
        let frame = read_frame(&mut self.reader).map_err(|e| match e {
            ReadError::Closed => Error::Protocol("aggregation server closed the connection".into()),
            ReadError::TooLarge(n) => Error::Protocol(format!("response of {n} bytes")),
            ReadError::Io(e) => e.into(),
        })?;
        Ok(AggResponse::decode(&frame)?)
    }
}

impl AggregationClient for TcpAggregationClient {
    fn register(&mut self, client_id: u32) -> Result<u32> {
        expect_registered(self.call(AggRequest::Register { client_id })?)
    }

    fn get_model(&mut self, round: u32) -> Result<ModelParams<f32>> {
        expect_model(self.call(AggRequest::GetModel { round })?)
    }

    fn pull_done(&mut self, round: u32) -> Result<()> {
        expect_pulls(self.call(AggRequest::PullDone { round })?)
    }

    fn put_model(
        &mut self,
        round: u32,
        n_samples: u64,
        params: ModelParams<f32>,
        timings: PhaseTimings,
    ) -> Result<bool> {
        expect_done(self.call(AggRequest::PutModel {
            round,
            n_samples,
            params,
            timings,
        })?)
    }
}
