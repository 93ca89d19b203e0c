//! Client-side connectors to the embedding server. Large batches are split
//! into windows of at most `window` records, one frame each.

use std::io::{BufReader, BufWriter, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use super::{EmbeddingStore, Session};
use crate::partition::CrossEdge;
use crate::wire::{
    read_frame, EmbRequest, EmbResponse, EmbeddingKey, EmbeddingRecord, ErrorCode, Frame,
    ReadError, StoreStats, WireError,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct ClientOptions {
    /// Maximum records per frame.
    pub window: usize,
    /// Injected latency before each request frame is sent.
    pub delay: Duration,
}

impl Default for ClientOptions {
    fn default() -> Self {
        ClientOptions {
            window: 512,
            delay: Duration::ZERO,
        }
    }
}

pub trait EmbeddingClient: Send {
    fn hello(&mut self, client_id: u32) -> Result<()>;

    fn remote_neighbors(&mut self) -> Result<Vec<CrossEdge>>;

    /// Fetches every key; fails if any is absent.
    fn batch_get(&mut self, keys: &[EmbeddingKey]) -> Result<Vec<EmbeddingRecord>>;

    fn batch_set(&mut self, dim: usize, records: Vec<EmbeddingRecord>) -> Result<usize>;

    fn stats(&mut self) -> Result<StoreStats>;

    /// Request frames sent so far over this connection.
    fn requests_sent(&self) -> u64;
}

fn get_windows(keys: &[EmbeddingKey], window: usize) -> Vec<EmbRequest> {
    keys.chunks(window.max(1))
        .map(|c| EmbRequest::BatchGet { keys: c.to_vec() })
        .collect()
}

fn set_windows(
    dim: usize,
    records: Vec<EmbeddingRecord>,
    window: usize,
) -> Result<Vec<EmbRequest>> {
    let dim = u16::try_from(dim).map_err(|_| Error::param(format!("embedding dim {dim} > u16")))?;
    Ok(records
        .chunks(window.max(1))
        .map(|c| EmbRequest::BatchSet {
            dim,
            records: c.to_vec(),
        })
        .collect())
}

fn unexpected(resp: EmbResponse) -> Error {
    match resp {
        EmbResponse::Error(e) => e.into(),
        other => Error::Protocol(format!("unexpected response {other:?}")),
    }
}

fn collect_records(responses: Vec<EmbResponse>) -> Result<Vec<EmbeddingRecord>> {
    let mut out = Vec::new();
    for r in responses {
        match r {
            EmbResponse::Records { records, .. } => out.extend(records),
            other => return Err(unexpected(other)),
        }
    }
    Ok(out)
}

fn collect_acks(responses: Vec<EmbResponse>) -> Result<usize> {
    let mut n = 0;
    for r in responses {
        match r {
            EmbResponse::SetAck { count } => n += count as usize,
            other => return Err(unexpected(other)),
        }
    }
    Ok(n)
}

/// Calls the store directly, without serialisation.
pub struct InProcEmbeddingClient {
    store: Arc<EmbeddingStore>,
    session: Session,
    options: ClientOptions,
    sent: u64,
}

impl InProcEmbeddingClient {
    pub fn new(store: Arc<EmbeddingStore>, options: ClientOptions) -> Self {
        InProcEmbeddingClient {
            store,
            session: Session::default(),
            options,
            sent: 0,
        }
    }

    fn call(&mut self, req: EmbRequest) -> EmbResponse {
        if !self.options.delay.is_zero() {
            thread::sleep(self.options.delay);
        }
        self.sent += 1;
        self.store.handle(&mut self.session, req)
    }

    fn call_all(&mut self, reqs: Vec<EmbRequest>) -> Vec<EmbResponse> {
        reqs.into_iter().map(|r| self.call(r)).collect()
    }
}

impl EmbeddingClient for InProcEmbeddingClient {
    fn hello(&mut self, client_id: u32) -> Result<()> {
        match self.call(EmbRequest::Hello { client_id }) {
            EmbResponse::Hello { .. } => Ok(()),
            other => Err(unexpected(other)),
        }
    }

    fn remote_neighbors(&mut self) -> Result<Vec<CrossEdge>> {
        match self.call(EmbRequest::GetNeighbors) {
            EmbResponse::Neighbors(e) => Ok(e),
            other => Err(unexpected(other)),
        }
    }

    fn batch_get(&mut self, keys: &[EmbeddingKey]) -> Result<Vec<EmbeddingRecord>> {
        let reqs = get_windows(keys, self.options.window);
        collect_records(self.call_all(reqs))
    }

    fn batch_set(&mut self, dim: usize, records: Vec<EmbeddingRecord>) -> Result<usize> {
        let reqs = set_windows(dim, records, self.options.window)?;
        collect_acks(self.call_all(reqs))
    }

    fn stats(&mut self) -> Result<StoreStats> {
        match self.call(EmbRequest::Stats) {
            EmbResponse::Stats(s) => Ok(s),
            other => Err(unexpected(other)),
        }
    }

    fn requests_sent(&self) -> u64 {
        self.sent
    }
}

/// TCP connector. Windows of one batch are pipelined: all request frames are
/// written back to back while a reader thread drains the responses.
pub struct TcpEmbeddingClient {
    stream: TcpStream,
    options: ClientOptions,
    sent: u64,
}

impl TcpEmbeddingClient {
    pub fn connect(addr: impl ToSocketAddrs, options: ClientOptions) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(TcpEmbeddingClient {
            stream,
            options,
            sent: 0,
        })
    }

    fn call_all(&mut self, reqs: Vec<EmbRequest>) -> Result<Vec<EmbResponse>> {
        let n = reqs.len();
        let read_half = self.stream.try_clone()?;
        let delay = self.options.delay;
        let mut writer = BufWriter::new(&self.stream);
        let frames = thread::scope(|s| {
            let reader = s.spawn(move || {
                let mut r = BufReader::new(read_half);
                (0..n)
                    .map(|_| read_frame(&mut r))
                    .collect::<Result<Vec<Frame>, ReadError>>()
            });
            let mut write_result = Ok(());
            for req in &reqs {
                if !delay.is_zero() {
                    thread::sleep(delay);
                }
                write_result = req
                    .encode()
                    .write_to(&mut writer)
                    .and_then(|_| writer.flush());
                if write_result.is_err() {
                    break;
                }
            }
            if write_result.is_err() {
                let _ = self.stream.shutdown(std::net::Shutdown::Read);
            }
            let frames = reader.join().expect("reader thread panicked");
            write_result.map_err(Error::from)?;
            frames.map_err(|e| match e {
                ReadError::Closed => Error::Protocol("server closed the connection".into()),
                ReadError::TooLarge(len) => {
                    WireError::new(ErrorCode::FrameTooLarge, format!("response of {len} bytes"))
                        .into()
                }
                ReadError::Io(e) => e.into(),
            })
        })?;
        self.sent += n as u64;
        frames
            .iter()
            .map(|f| EmbResponse::decode(f).map_err(Error::from))
            .collect()
    }

    fn call(&mut self, req: EmbRequest) -> Result<EmbResponse> {
        Ok(self.call_all(vec![req])?.pop().expect("one response"))
    }
}

impl EmbeddingClient for TcpEmbeddingClient {
    fn hello(&mut self, client_id: u32) -> Result<()> {
        match self.call(EmbRequest::Hello { client_id })? {
            EmbResponse::Hello { .. } => Ok(()),
            other => Err(unexpected(other)),
        }
    }

    fn remote_neighbors(&mut self) -> Result<Vec<CrossEdge>> {
        match self.call(EmbRequest::GetNeighbors)? {
            EmbResponse::Neighbors(e) => Ok(e),
            other => Err(unexpected(other)),
        }
    }

    fn batch_get(&mut self, keys: &[EmbeddingKey]) -> Result<Vec<EmbeddingRecord>> {
        let reqs = get_windows(keys, self.options.window);
        collect_records(self.call_all(reqs)?)
    }

    fn batch_set(&mut self, dim: usize, records: Vec<EmbeddingRecord>) -> Result<usize> {
        let reqs = set_windows(dim, records, self.options.window)?;
        collect_acks(self.call_all(reqs)?)
    }

    fn stats(&mut self) -> Result<StoreStats> {
        match self.call(EmbRequest::Stats)? {
            EmbResponse::Stats(s) => Ok(s),
            other => Err(unexpected(other)),
        }
    }

    fn requests_sent(&self) -> u64 {
        self.sent
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeId;
    use crate::net;
    use crate::partition::CrossEdgeManifest;

    fn records(n: usize, dim: usize) -> Vec<EmbeddingRecord> {
        (0..n)
            .map(|i| EmbeddingRecord {
                key: EmbeddingKey::new(NodeId(i as u64), 1 + i % 2),
                version: 0,
                vector: (0..dim).map(|j| (i * dim + j) as f32).collect(),
            })
            .collect()
    }

    fn manifest() -> CrossEdgeManifest {
        let e = CrossEdge {
            local: NodeId(0),
            remote: NodeId(9),
            owner: 1,
        };
        CrossEdgeManifest::new(vec![vec![e], vec![]])
    }

    fn exercise(c: &mut dyn EmbeddingClient, store: &EmbeddingStore) {
        c.hello(0).unwrap();
        assert_eq!(c.remote_neighbors().unwrap().len(), 1);
        let recs = records(10_000, 4);
        let keys: Vec<_> = recs.iter().map(|r| r.key).collect();
        let before = store
            .counters()
            .requests
            .load(std::sync::atomic::Ordering::Relaxed);
        assert_eq!(c.batch_set(4, recs.clone()).unwrap(), 10_000);
        let got = c.batch_get(&keys).unwrap();
        assert_eq!(got, recs);
        let after = store
            .counters()
            .requests
            .load(std::sync::atomic::Ordering::Relaxed);
        // 10k keys at window 512 is 20 frames each way.
        assert_eq!(after - before, 40);
        assert_eq!(c.stats().unwrap().num_keys, 10_000);
        assert_eq!(store.written_by(0, 0), 10_000);
        let err = c
            .batch_get(&[EmbeddingKey::new(NodeId(123_456), 1)])
            .unwrap_err();
        assert!(matches!(
            err,
            Error::Remote {
                code: ErrorCode::MissingKey,
                ..
            }
        ));
    }

    #[test]
    fn in_process_client() {
        let store = Arc::new(EmbeddingStore::new(4, 3, manifest()));
        let mut c = InProcEmbeddingClient::new(store.clone(), ClientOptions::default());
        exercise(&mut c, &store);
    }

    #[test]
    fn tcp_client_and_malformed_frames() {
        let store = Arc::new(EmbeddingStore::new(4, 3, manifest()));
        let server = net::serve("127.0.0.1:0", store.clone()).unwrap();
        let mut c =
            TcpEmbeddingClient::connect(server.local_addr(), ClientOptions::default()).unwrap();
        exercise(&mut c, &store);

        // Garbage payload gets an ERROR frame and the connection survives.
        let mut raw = TcpStream::connect(server.local_addr()).unwrap();
        Frame::new(0x03, vec![1, 2, 3]).write_to(&mut raw).unwrap();
        let reply = read_frame(&mut raw).unwrap();
        assert_eq!(reply.as_error().unwrap().code, ErrorCode::Malformed);
        Frame::new(0x42, vec![]).write_to(&mut raw).unwrap();
        let reply = read_frame(&mut raw).unwrap();
        assert_eq!(reply.as_error().unwrap().code, ErrorCode::UnknownOpcode);

        // Oversized header: ERROR, then close.
        raw.write_all(&u32::MAX.to_le_bytes()).unwrap();
        raw.write_all(&[0x03]).unwrap();
        let reply = read_frame(&mut raw).unwrap();
        assert_eq!(reply.as_error().unwrap().code, ErrorCode::FrameTooLarge);
        assert!(matches!(read_frame(&mut raw), Err(ReadError::Closed)));
        server.shutdown();
    }

    #[test]
    fn injected_delay_is_paid_per_frame() {
        let store = Arc::new(EmbeddingStore::new(4, 3, manifest()));
        let opts = ClientOptions {
            window: 10,
            delay: Duration::from_millis(5),
        };
        let mut c = InProcEmbeddingClient::new(store, opts);
        let t = std::time::Instant::now();
        c.batch_set(4, records(100, 4)).unwrap();
        assert!(t.elapsed() >= Duration::from_millis(50));
        assert_eq!(c.requests_sent(), 10);
    }
}
