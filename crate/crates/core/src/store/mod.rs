//! The embedding server: a key-value store of boundary-vertex embeddings
//! `(node, layer) -> vector` for layers `1..L-1`, plus the cross-client edge
//! manifest. Raw features (layer 0) are never accepted.

mod client;

pub use client::{ClientOptions, EmbeddingClient, InProcEmbeddingClient, TcpEmbeddingClient};

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::{Mutex, RwLock};

use crate::net::Service;
use crate::partition::{CrossEdge, CrossEdgeManifest};
use crate::wire::{
    EmbRequest, EmbResponse, EmbeddingKey, EmbeddingRecord, ErrorCode, Frame, StoreStats, WireError,
};

#[derive(Clone, Debug)]
struct Entry {
    version: u32,
    vector: Vec<f32>,
}

/// Monotone request/traffic counters, readable while the store is serving.
#[derive(Debug, Default)]
pub struct StoreCounters {
    pub requests: AtomicU64,
    pub get_requests: AtomicU64,
    pub set_requests: AtomicU64,
    pub keys_served: AtomicU64,
    pub keys_written: AtomicU64,
    pub errors: AtomicU64,
}

#[derive(Debug)]
pub struct EmbeddingStore {
    dim: usize,
    num_layers: usize,
    entries: RwLock<HashMap<EmbeddingKey, Entry>>,
    manifest: CrossEdgeManifest,
    counters: StoreCounters,
    written_by: Mutex<HashMap<(u32, u32), u64>>,
}

impl EmbeddingStore {
    /// `num_layers` is the model depth L; embeddings of layers `1..L-1`, each
    /// `dim` wide, may be stored.
    pub fn new(dim: usize, num_layers: usize, manifest: CrossEdgeManifest) -> Self {
        EmbeddingStore {
            dim,
            num_layers,
            entries: RwLock::default(),
            manifest,
            counters: StoreCounters::default(),
            written_by: Mutex::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn counters(&self) -> &StoreCounters {
        &self.counters
    }

    fn check_layer(&self, layer: u8) -> Result<(), WireError> {
        if layer == 0 || layer as usize >= self.num_layers {
            return Err(WireError::new(
                ErrorCode::LayerOutOfRange,
                format!(
                    "layer {layer} outside 1..={}",
                    self.num_layers.saturating_sub(1)
                ),
            ));
        }
        Ok(())
    }

    /// Applies a batch of writes atomically: either every record is stored
    /// or, on any validation error, none is.
    pub fn batch_set(
        &self,
        writer: Option<u32>,
        records: &[EmbeddingRecord],
    ) -> Result<usize, WireError> {
        for r in records {
            self.check_layer(r.key.layer)?;
            if r.vector.len() != self.dim {
                return Err(WireError::new(
                    ErrorCode::DimensionMismatch,
                    format!(
                        "vector of {} values, store dim is {}",
                        r.vector.len(),
                        self.dim
                    ),
                ));
            }
        }
        let mut entries = self.entries.write();
        for r in records {
            if let Some(e) = entries.get(&r.key) {
                if r.version < e.version {
                    return Err(WireError::new(
                        ErrorCode::VersionRegression,
                        format!(
                            "node {} layer {}: version {} < stored {}",
                            r.key.node, r.key.layer, r.version, e.version
                        ),
                    ));
                }
            }
        }
        for r in records {
            entries.insert(
                r.key,
                Entry {
                    version: r.version,
                    vector: r.vector.clone(),
                },
            );
        }
        drop(entries);
        self.counters
            .keys_written
            .fetch_add(records.len() as u64, Ordering::Relaxed);
        if let Some(client) = writer {
            let mut by = self.written_by.lock();
            for r in records {
                *by.entry((client, r.version)).or_default() += 1;
            }
        }
        Ok(records.len())
    }

    /// Reads a batch under one consistent snapshot. Any absent key fails the
    /// whole request.
    pub fn batch_get(&self, keys: &[EmbeddingKey]) -> Result<Vec<EmbeddingRecord>, WireError> {
        for k in keys {
            self.check_layer(k.layer)?;
        }
        let entries = self.entries.read();
        let out = keys
            .iter()
            .map(|k| {
                entries
                    .get(k)
                    .map(|e| EmbeddingRecord {
                        key: *k,
                        version: e.version,
                        vector: e.vector.clone(),
                    })
                    .ok_or_else(|| {
                        WireError::new(
                            ErrorCode::MissingKey,
                            format!("no embedding for node {} layer {}", k.node, k.layer),
                        )
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        drop(entries);
        self.counters
            .keys_served
            .fetch_add(keys.len() as u64, Ordering::Relaxed);
        Ok(out)
    }

    pub fn remote_neighbors(&self, client: u32) -> Result<&[CrossEdge], WireError> {
        self.manifest.for_client(client as usize).ok_or_else(|| {
            WireError::new(
                ErrorCode::UnknownClient,
                format!(
                    "client {client} not in manifest of {}",
                    self.manifest.num_clients()
                ),
            )
        })
    }

    pub fn stats(&self) -> StoreStats {
        let n = self.entries.read().len() as u64;
        StoreStats {
            num_keys: n,
            bytes_resident: n * (self.dim as u64 * 4),
        }
    }

    /// Records written by `client` carrying `version`.
    pub fn written_by(&self, client: u32, version: u32) -> u64 {
        self.written_by
            .lock()
            .get(&(client, version))
            .copied()
            .unwrap_or(0)
    }

    pub fn handle(&self, session: &mut Session, req: EmbRequest) -> EmbResponse {
        self.counters.requests.fetch_add(1, Ordering::Relaxed);
        let result = match req {
            EmbRequest::Hello { client_id } => self.remote_neighbors(client_id).map(|_| {
                session.client = Some(client_id);
                EmbResponse::Hello { client_id }
            }),
            EmbRequest::GetNeighbors => match session.client {
                Some(c) => self
                    .remote_neighbors(c)
                    .map(|e| EmbResponse::Neighbors(e.to_vec())),
                None => Err(WireError::new(ErrorCode::NotRegistered, "HELLO first")),
            },
            EmbRequest::BatchGet { keys } => {
                self.counters.get_requests.fetch_add(1, Ordering::Relaxed);
                self.batch_get(&keys).map(|records| EmbResponse::Records {
                    dim: self.dim as u16,
                    records,
                })
            }
            EmbRequest::BatchSet { dim, records } => {
                self.counters.set_requests.fetch_add(1, Ordering::Relaxed);
                if dim as usize != self.dim {
                    Err(WireError::new(
                        ErrorCode::DimensionMismatch,
                        format!("batch dim {dim}, store dim {}", self.dim),
                    ))
                } else {
                    self.batch_set(session.client, &records)
                        .map(|n| EmbResponse::SetAck { count: n as u32 })
                }
            }
            EmbRequest::Stats => Ok(EmbResponse::Stats(self.stats())),
        };
        result.unwrap_or_else(|e| {
            self.counters.errors.fetch_add(1, Ordering::Relaxed);
            EmbResponse::Error(e)
        })
    }
}

/// Per-connection state: the client ID announced by HELLO.
#[derive(Debug, Default)]
pub struct Session {
    pub client: Option<u32>,
}

impl Service for EmbeddingStore {
    type Session = Session;

    fn handle(&self, session: &mut Session, frame: Frame) -> Frame {
        match EmbRequest::decode(&frame) {
            Ok(req) => EmbeddingStore::handle(self, session, req).encode(),
            Err(e) => {
                self.counters.requests.fetch_add(1, Ordering::Relaxed);
                self.counters.errors.fetch_add(1, Ordering::Relaxed);
                Frame::error(&e)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeId;

    fn rec(node: u64, layer: u8, version: u32, v: &[f32]) -> EmbeddingRecord {
        EmbeddingRecord {
            key: EmbeddingKey {
                node: NodeId(node),
                layer,
            },
            version,
            vector: v.to_vec(),
        }
    }

    fn store() -> EmbeddingStore {
        EmbeddingStore::new(3, 3, CrossEdgeManifest::new(vec![vec![], vec![]]))
    }

    #[test]
    fn set_then_get_is_bitwise() {
        let s = store();
        let v = [1.0, f32::from_bits(0x7fc0_0001), -0.0];
        s.batch_set(None, &[rec(7, 1, 0, &v)]).unwrap();
        let got = s.batch_get(&[EmbeddingKey::new(NodeId(7), 1)]).unwrap();
        let bits: Vec<u32> = got[0].vector.iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits, v.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn overwrite_keeps_key_count() {
        let s = store();
        s.batch_set(None, &[rec(7, 1, 0, &[1.0; 3])]).unwrap();
        s.batch_set(None, &[rec(7, 1, 1, &[2.0; 3])]).unwrap();
        assert_eq!(s.stats().num_keys, 1);
        let got = s.batch_get(&[EmbeddingKey::new(NodeId(7), 1)]).unwrap();
        assert_eq!((got[0].version, got[0].vector[0]), (1, 2.0));
    }

    #[test]
    fn layer_zero_and_bad_dims_are_rejected_atomically() {
        let s = store();
        let err = s
            .batch_set(None, &[rec(1, 1, 0, &[0.0; 3]), rec(2, 0, 0, &[0.0; 3])])
            .unwrap_err();
        assert_eq!(err.code, ErrorCode::LayerOutOfRange);
        assert_eq!(s.stats().num_keys, 0);
        let err = s.batch_set(None, &[rec(1, 3, 0, &[0.0; 3])]).unwrap_err();
        assert_eq!(err.code, ErrorCode::LayerOutOfRange);
        let err = s.batch_set(None, &[rec(1, 1, 0, &[0.0; 2])]).unwrap_err();
        assert_eq!(err.code, ErrorCode::DimensionMismatch);
    }

    #[test]
    fn missing_key_is_an_error_not_zeros() {
        let s = store();
        s.batch_set(None, &[rec(1, 1, 0, &[0.0; 3])]).unwrap();
        let err = s
            .batch_get(&[
                EmbeddingKey::new(NodeId(1), 1),
                EmbeddingKey::new(NodeId(2), 1),
            ])
            .unwrap_err();
        assert_eq!(err.code, ErrorCode::MissingKey);
    }

    #[test]
    fn versions_never_regress() {
        let s = store();
        s.batch_set(None, &[rec(1, 1, 5, &[0.0; 3])]).unwrap();
        let err = s.batch_set(None, &[rec(1, 1, 4, &[0.0; 3])]).unwrap_err();
        assert_eq!(err.code, ErrorCode::VersionRegression);
    }

    #[test]
    fn empty_store_stats_and_unknown_client() {
        let s = store();
        assert_eq!(s.stats(), StoreStats::default());
        assert_eq!(
            s.remote_neighbors(2).unwrap_err().code,
            ErrorCode::UnknownClient
        );
        let mut session = Session::default();
        let r = s.handle(&mut session, EmbRequest::GetNeighbors);
        assert!(matches!(r, EmbResponse::Error(e) if e.code == ErrorCode::NotRegistered));
    }

    #[test]
    fn writes_are_attributed_to_the_session_client() {
        let s = store();
        let mut session = Session::default();
        s.handle(&mut session, EmbRequest::Hello { client_id: 1 });
        s.handle(
            &mut session,
            EmbRequest::BatchSet {
                dim: 3,
                records: vec![rec(1, 1, 2, &[0.0; 3]), rec(1, 2, 2, &[0.0; 3])],
            },
        );
        assert_eq!(s.written_by(1, 2), 2);
        assert_eq!(s.written_by(0, 2), 0);
    }
}
