//! Length-prefixed binary framing shared by the embedding and aggregation
//! services. A frame is `u32 payload_len | u8 opcode | payload`, all
//! little-endian; `payload_len` counts the payload bytes only. A response
//! carries the request opcode with the high bit set.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::gnn::ModelParams;
use crate::graph::NodeId;
use crate::partition::CrossEdge;

pub const MAX_PAYLOAD: u32 = 256 << 20;
pub const RESPONSE: u8 = 0x80;

pub mod op {
    pub const HELLO: u8 = 0x01;
    pub const GET_NEIGHBORS: u8 = 0x02;
    pub const BATCH_GET: u8 = 0x03;
    pub const BATCH_SET: u8 = 0x04;
    pub const STATS: u8 = 0x05;
    pub const REGISTER: u8 = 0x10;
    pub const GET_MODEL: u8 = 0x11;
    pub const PUT_MODEL: u8 = 0x12;
    pub const ROUND_DONE: u8 = 0x13;
    /// Barrier: held until every client has finished its pull for the round.
    pub const PULL_DONE: u8 = 0x14;
    pub const ERROR: u8 = 0x7F;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum ErrorCode {
    Malformed = 1,
    UnknownOpcode = 2,
    DimensionMismatch = 3,
    LayerOutOfRange = 4,
    MissingKey = 5,
    UnknownClient = 6,
    NotRegistered = 7,
    FrameTooLarge = 8,
    RoundMismatch = 9,
    VersionRegression = 10,
    Aborted = 11,
    Internal = 12,
}

impl ErrorCode {
    pub fn from_u16(v: u16) -> ErrorCode {
        use ErrorCode::*;
        match v {
            1 => Malformed,
            2 => UnknownOpcode,
            3 => DimensionMismatch,
            4 => LayerOutOfRange,
            5 => MissingKey,
            6 => UnknownClient,
            7 => NotRegistered,
            8 => FrameTooLarge,
            9 => RoundMismatch,
            10 => VersionRegression,
            11 => Aborted,
            _ => Internal,
        }
    }
}

/// A protocol-level failure that is reported to the peer as an ERROR frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WireError {
    pub code: ErrorCode,
    pub message: String,
}

impl WireError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        WireError {
            code,
            message: message.into(),
        }
    }

    pub fn malformed(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Malformed, message)
    }
}

impl From<WireError> for crate::Error {
    fn from(e: WireError) -> Self {
        crate::Error::Remote {
            code: e.code,
            message: e.message,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub opcode: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(opcode: u8, payload: Vec<u8>) -> Self {
        Frame { opcode, payload }
    }

    pub fn error(e: &WireError) -> Frame {
        let mut p = Vec::with_capacity(2 + e.message.len());
        p.write_u16::<LittleEndian>(e.code as u16).unwrap();
        p.extend_from_slice(e.message.as_bytes());
        Frame::new(op::ERROR | RESPONSE, p)
    }

    /// Decodes the payload of an ERROR frame.
    pub fn as_error(&self) -> Option<WireError> {
        if self.opcode & !RESPONSE != op::ERROR {
            return None;
        }
        let mut cur = self.payload.as_slice();
        let code = cur
            .read_u16::<LittleEndian>()
            .unwrap_or(ErrorCode::Internal as u16);
        Some(WireError::new(
            ErrorCode::from_u16(code),
            String::from_utf8_lossy(cur).into_owned(),
        ))
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        let mut header = [0u8; 5];
        header[..4].copy_from_slice(&(self.payload.len() as u32).to_le_bytes());
        header[4] = self.opcode;
        w.write_all(&header)?;
        w.write_all(&self.payload)
    }
}

#[derive(Debug)]
pub enum ReadError {
    /// Peer closed the connection cleanly between frames.
    Closed,
    TooLarge(u32),
    Io(io::Error),
}

pub fn read_frame(r: &mut impl Read) -> Result<Frame, ReadError> {
    let mut header = [0u8; 5];
    let mut got = 0;
    while got < header.len() {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Err(ReadError::Closed),
            Ok(0) => {
                return Err(ReadError::Io(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    "truncated frame header",
                )))
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(ReadError::Io(e)),
        }
    }
    let len = u32::from_le_bytes(header[..4].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(ReadError::TooLarge(len));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(ReadError::Io)?;
    Ok(Frame::new(header[4], payload))
}

/// Cursor over a payload that turns short reads into `Malformed`.
pub(crate) struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader(buf)
    }

    fn short(_: io::Error) -> WireError {
        WireError::malformed("payload truncated")
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        self.0.read_u8().map_err(Self::short)
    }
    pub fn u16(&mut self) -> Result<u16, WireError> {
        self.0.read_u16::<LittleEndian>().map_err(Self::short)
    }
    pub fn u32(&mut self) -> Result<u32, WireError> {
        self.0.read_u32::<LittleEndian>().map_err(Self::short)
    }
    pub fn u64(&mut self) -> Result<u64, WireError> {
        self.0.read_u64::<LittleEndian>().map_err(Self::short)
    }
    pub fn f32(&mut self) -> Result<f32, WireError> {
        self.0.read_f32::<LittleEndian>().map_err(Self::short)
    }
    pub fn f64(&mut self) -> Result<f64, WireError> {
        self.0.read_f64::<LittleEndian>().map_err(Self::short)
    }
    pub fn remaining(&self) -> usize {
        self.0.len()
    }
    pub fn params(&mut self) -> Result<ModelParams<f32>, WireError> {
        ModelParams::decode(&mut self.0).map_err(|e| WireError::malformed(e.to_string()))
    }
    pub fn finish(self) -> Result<(), WireError> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(WireError::malformed(format!(
                "{} trailing payload bytes",
                self.0.len()
            )))
        }
    }
}

// ---------------------------------------------------------------------------
// Embedding service messages

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EmbeddingKey {
    pub node: NodeId,
    pub layer: u8,
}

impl EmbeddingKey {
    pub fn new(node: NodeId, layer: usize) -> Self {
        EmbeddingKey {
            node,
            layer: layer as u8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub key: EmbeddingKey,
    pub version: u32,
    pub vector: Vec<f32>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StoreStats {
    pub num_keys: u64,
    pub bytes_resident: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EmbRequest {
    Hello {
        client_id: u32,
    },
    GetNeighbors,
    BatchGet {
        keys: Vec<EmbeddingKey>,
    },
    BatchSet {
        dim: u16,
        records: Vec<EmbeddingRecord>,
    },
    Stats,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EmbResponse {
    Hello {
        client_id: u32,
    },
    Neighbors(Vec<CrossEdge>),
    Records {
        dim: u16,
        records: Vec<EmbeddingRecord>,
    },
    SetAck {
        count: u32,
    },
    Stats(StoreStats),
    Error(WireError),
}

fn put_records(p: &mut Vec<u8>, dim: u16, records: &[EmbeddingRecord]) {
    p.write_u32::<LittleEndian>(records.len() as u32).unwrap();
    p.write_u16::<LittleEndian>(dim).unwrap();
    for r in records {
        p.write_u64::<LittleEndian>(r.key.node.0).unwrap();
        p.write_u8(r.key.layer).unwrap();
        p.write_u32::<LittleEndian>(r.version).unwrap();
        for &v in &r.vector {
            p.write_f32::<LittleEndian>(v).unwrap();
        }
    }
}

fn get_records(r: &mut Reader) -> Result<(u16, Vec<EmbeddingRecord>), WireError> {
    let count = r.u32()? as usize;
    let dim = r.u16()?;
    let per = 13 + 4 * dim as usize;
    if r.remaining() != count * per {
        return Err(WireError::malformed(format!(
            "{count} records of dim {dim} need {} bytes, frame has {}",
            count * per,
            r.remaining()
        )));
    }
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let node = NodeId(r.u64()?);
        let layer = r.u8()?;
        let version = r.u32()?;
        let vector = (0..dim).map(|_| r.f32()).collect::<Result<_, _>>()?;
        records.push(EmbeddingRecord {
            key: EmbeddingKey { node, layer },
            version,
            vector,
        });
    }
    Ok((dim, records))
}

impl EmbRequest {
    pub fn encode(&self) -> Frame {
        let mut p = Vec::new();
        let opcode = match self {
            EmbRequest::Hello { client_id } => {
                p.write_u32::<LittleEndian>(*client_id).unwrap();
                op::HELLO
            }
            EmbRequest::GetNeighbors => op::GET_NEIGHBORS,
            EmbRequest::BatchGet { keys } => {
                p.reserve(4 + keys.len() * 9);
                p.write_u32::<LittleEndian>(keys.len() as u32).unwrap();
                for k in keys {
                    p.write_u64::<LittleEndian>(k.node.0).unwrap();
                    p.write_u8(k.layer).unwrap();
                }
                op::BATCH_GET
            }
            EmbRequest::BatchSet { dim, records } => {
                put_records(&mut p, *dim, records);
                op::BATCH_SET
            }
            EmbRequest::Stats => op::STATS,
        };
        Frame::new(opcode, p)
    }

    pub fn decode(frame: &Frame) -> Result<EmbRequest, WireError> {
        let mut r = Reader::new(&frame.payload);
        let req = match frame.opcode {
            op::HELLO => EmbRequest::Hello {
                client_id: r.u32()?,
            },
            op::GET_NEIGHBORS => EmbRequest::GetNeighbors,
            op::BATCH_GET => {
                let count = r.u32()? as usize;
                if r.remaining() != count * 9 {
                    return Err(WireError::malformed(format!(
                        "{count} keys need {} bytes, frame has {}",
                        count * 9,
                        r.remaining()
                    )));
                }
                let keys = (0..count)
                    .map(|_| {
                        Ok(EmbeddingKey {
                            node: NodeId(r.u64()?),
                            layer: r.u8()?,
                        })
                    })
                    .collect::<Result<_, WireError>>()?;
                EmbRequest::BatchGet { keys }
            }
            op::BATCH_SET => {
                let (dim, records) = get_records(&mut r)?;
                EmbRequest::BatchSet { dim, records }
            }
            op::STATS => EmbRequest::Stats,
            other => {
                return Err(WireError::new(
                    ErrorCode::UnknownOpcode,
                    format!("opcode {other:#04x} is not an embedding request"),
                ))
            }
        };
        r.finish()?;
        Ok(req)
    }
}

impl EmbResponse {
    pub fn encode(&self) -> Frame {
        let mut p = Vec::new();
        let opcode = match self {
            EmbResponse::Hello { client_id } => {
                p.write_u32::<LittleEndian>(*client_id).unwrap();
                op::HELLO
            }
            EmbResponse::Neighbors(edges) => {
                p.write_u32::<LittleEndian>(edges.len() as u32).unwrap();
                for e in edges {
                    p.write_u64::<LittleEndian>(e.local.0).unwrap();
                    p.write_u64::<LittleEndian>(e.remote.0).unwrap();
                    p.write_u32::<LittleEndian>(e.owner).unwrap();
                }
                op::GET_NEIGHBORS
            }
            EmbResponse::Records { dim, records } => {
                put_records(&mut p, *dim, records);
                op::BATCH_GET
            }
            EmbResponse::SetAck { count } => {
                p.write_u32::<LittleEndian>(*count).unwrap();
                op::BATCH_SET
            }
            EmbResponse::Stats(s) => {
                p.write_u64::<LittleEndian>(s.num_keys).unwrap();
                p.write_u64::<LittleEndian>(s.bytes_resident).unwrap();
                op::STATS
            }
            EmbResponse::Error(e) => return Frame::error(e),
        };
        Frame::new(opcode | RESPONSE, p)
    }

    pub fn decode(frame: &Frame) -> Result<EmbResponse, WireError> {
        if let Some(e) = frame.as_error() {
            return Ok(EmbResponse::Error(e));
        }
        if frame.opcode & RESPONSE == 0 {
            return Err(WireError::malformed("expected a response frame"));
        }
        let mut r = Reader::new(&frame.payload);
        let resp = match frame.opcode & !RESPONSE {
            op::HELLO => EmbResponse::Hello {
                client_id: r.u32()?,
            },
            op::GET_NEIGHBORS => {
                let count = r.u32()? as usize;
                if r.remaining() != count * 20 {
                    return Err(WireError::malformed("neighbor list length"));
                }
                let edges = (0..count)
                    .map(|_| {
                        Ok(CrossEdge {
                            local: NodeId(r.u64()?),
                            remote: NodeId(r.u64()?),
                            owner: r.u32()?,
                        })
                    })
                    .collect::<Result<_, WireError>>()?;
                EmbResponse::Neighbors(edges)
            }
            op::BATCH_GET => {
                let (dim, records) = get_records(&mut r)?;
                EmbResponse::Records { dim, records }
            }
            op::BATCH_SET => EmbResponse::SetAck { count: r.u32()? },
            op::STATS => EmbResponse::Stats(StoreStats {
                num_keys: r.u64()?,
                bytes_resident: r.u64()?,
            }),
            other => {
                return Err(WireError::new(
                    ErrorCode::UnknownOpcode,
                    format!("unexpected response opcode {other:#04x}"),
                ))
            }
        };
        r.finish()?;
        Ok(resp)
    }
}

// ---------------------------------------------------------------------------
// Aggregation service messages

/// Per-phase wall-clock seconds of one client round.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTimings {
    pub pull_s: f64,
    pub sample_s: f64,
    pub train_s: f64,
    pub push_s: f64,
    pub round_s: f64,
}

impl PhaseTimings {
    pub fn as_array(&self) -> [f64; 5] {
        [
            self.pull_s,
            self.sample_s,
            self.train_s,
            self.push_s,
            self.round_s,
        ]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        PhaseTimings {
            pull_s: a[0],
            sample_s: a[1],
            train_s: a[2],
            push_s: a[3],
            round_s: a[4],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AggRequest {
    Register {
        client_id: u32,
    },
    GetModel {
        round: u32,
    },
    PullDone {
        round: u32,
    },
    PutModel {
        round: u32,
        n_samples: u64,
        params: ModelParams<f32>,
        timings: PhaseTimings,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum AggResponse {
    Registered {
        client_id: u32,
        num_clients: u32,
    },
    Model {
        round: u32,
        params: ModelParams<f32>,
    },
    RoundDone {
        round: u32,
        more: bool,
    },
    PullsComplete {
        round: u32,
    },
    Error(WireError),
}

impl AggRequest {
    pub fn encode(&self) -> Frame {
        let mut p = Vec::new();
        let opcode = match self {
            AggRequest::Register { client_id } => {
                p.write_u32::<LittleEndian>(*client_id).unwrap();
                op::REGISTER
            }
            AggRequest::GetModel { round } => {
                p.write_u32::<LittleEndian>(*round).unwrap();
                op::GET_MODEL
            }
            AggRequest::PullDone { round } => {
                p.write_u32::<LittleEndian>(*round).unwrap();
                op::PULL_DONE
            }
            AggRequest::PutModel {
                round,
                n_samples,
                params,
                timings,
            } => {
                p.write_u32::<LittleEndian>(*round).unwrap();
                p.write_u64::<LittleEndian>(*n_samples).unwrap();
                params.encode(&mut p);
                for t in timings.as_array() {
                    p.write_f64::<LittleEndian>(t).unwrap();
                }
                op::PUT_MODEL
            }
        };
        Frame::new(opcode, p)
    }

    pub fn decode(frame: &Frame) -> Result<AggRequest, WireError> {
        let mut r = Reader::new(&frame.payload);
        let req = match frame.opcode {
            op::REGISTER => AggRequest::Register {
                client_id: r.u32()?,
            },
            op::GET_MODEL => AggRequest::GetModel { round: r.u32()? },
            op::PULL_DONE => AggRequest::PullDone { round: r.u32()? },
            op::PUT_MODEL => {
                let round = r.u32()?;
                let n_samples = r.u64()?;
                let params = r.params()?;
                let mut t = [0.0; 5];
                for v in &mut t {
                    *v = r.f64()?;
                }
                AggRequest::PutModel {
                    round,
                    n_samples,
                    params,
                    timings: PhaseTimings::from_array(t),
                }
            }
            other => {
                return Err(WireError::new(
                    ErrorCode::UnknownOpcode,
                    format!("opcode {other:#04x} is not an aggregation request"),
                ))
            }
        };
        r.finish()?;
        Ok(req)
    }
}

impl AggResponse {
    pub fn encode(&self) -> Frame {
        let mut p = Vec::new();
        let opcode = match self {
            AggResponse::Registered {
                client_id,
                num_clients,
            } => {
                p.write_u32::<LittleEndian>(*client_id).unwrap();
                p.write_u32::<LittleEndian>(*num_clients).unwrap();
                op::REGISTER
            }
            AggResponse::Model { round, params } => {
                p.write_u32::<LittleEndian>(*round).unwrap();
                params.encode(&mut p);
                op::GET_MODEL
            }
            AggResponse::RoundDone { round, more } => {
                p.write_u32::<LittleEndian>(*round).unwrap();
                p.write_u8(*more as u8).unwrap();
                op::ROUND_DONE
            }
            AggResponse::PullsComplete { round } => {
                p.write_u32::<LittleEndian>(*round).unwrap();
                op::PULL_DONE
            }
            AggResponse::Error(e) => return Frame::error(e),
        };
        Frame::new(opcode | RESPONSE, p)
    }

    pub fn decode(frame: &Frame) -> Result<AggResponse, WireError> {
        if let Some(e) = frame.as_error() {
            return Ok(AggResponse::Error(e));
        }
        let mut r = Reader::new(&frame.payload);
        let resp = match frame.opcode {
            o if o == op::REGISTER | RESPONSE => AggResponse::Registered {
                client_id: r.u32()?,
                num_clients: r.u32()?,
            },
            o if o == op::GET_MODEL | RESPONSE => AggResponse::Model {
                round: r.u32()?,
                params: r.params()?,
            },
            o if o == op::ROUND_DONE | RESPONSE => AggResponse::RoundDone {
                round: r.u32()?,
                more: r.u8()? != 0,
            },
            o if o == op::PULL_DONE | RESPONSE => AggResponse::PullsComplete { round: r.u32()? },
            other => {
                return Err(WireError::new(
                    ErrorCode::UnknownOpcode,
                    format!("unexpected response opcode {other:#04x}"),
                ))
            }
        };
        r.finish()?;
        Ok(resp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn roundtrip_frame(f: &Frame) -> Frame {
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        read_frame(&mut buf.as_slice()).unwrap()
    }

    proptest! {
        #[test]
        fn batch_set_round_trips_bitwise(
            raw in prop::collection::vec((any::<u64>(), 1u8..4, any::<u32>(), prop::collection::vec(any::<u32>(), 3)), 0..20)
        ) {
            let records: Vec<EmbeddingRecord> = raw
                .into_iter()
                .map(|(n, l, ver, bits)| EmbeddingRecord {
                    key: EmbeddingKey { node: NodeId(n), layer: l },
                    version: ver,
                    vector: bits.into_iter().map(f32::from_bits).collect(),
                })
                .collect();
            let req = EmbRequest::BatchSet { dim: 3, records };
            let back = EmbRequest::decode(&roundtrip_frame(&req.encode())).unwrap();
            let bits = |r: &EmbRequest| match r {
                EmbRequest::BatchSet { records, .. } => records
                    .iter()
                    .map(|r| (r.key, r.version, r.vector.iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
                    .collect::<Vec<_>>(),
                _ => unreachable!(),
            };
            prop_assert_eq!(bits(&back), bits(&req));
        }

        #[test]
        fn arbitrary_payloads_never_panic(opcode in any::<u8>(), payload in prop::collection::vec(any::<u8>(), 0..64)) {
            let f = Frame::new(opcode, payload);
            let _ = EmbRequest::decode(&f);
            let _ = EmbResponse::decode(&f);
            let _ = AggRequest::decode(&f);
            let _ = AggResponse::decode(&f);
        }
    }

    #[test]
    fn frame_header_layout() {
        let mut buf = Vec::new();
        EmbRequest::Hello { client_id: 7 }
            .encode()
            .write_to(&mut buf)
            .unwrap();
        assert_eq!(buf, vec![4, 0, 0, 0, op::HELLO, 7, 0, 0, 0]);
    }

    #[test]
    fn truncated_and_oversized_frames() {
        let mut short: &[u8] = &[9, 0, 0, 0, op::STATS, 1];
        assert!(matches!(read_frame(&mut short), Err(ReadError::Io(_))));
        let mut big: &[u8] = &[0xff, 0xff, 0xff, 0xff, op::STATS];
        assert!(matches!(read_frame(&mut big), Err(ReadError::TooLarge(_))));
        let mut empty: &[u8] = &[];
        assert!(matches!(read_frame(&mut empty), Err(ReadError::Closed)));
    }

    #[test]
    fn dimension_count_mismatch_is_malformed() {
        let req = EmbRequest::BatchSet {
            dim: 2,
            records: vec![EmbeddingRecord {
                key: EmbeddingKey::new(NodeId(1), 1),
                version: 0,
                vector: vec![1.0, 2.0, 3.0],
            }],
        };
        let err = EmbRequest::decode(&req.encode()).unwrap_err();
        assert_eq!(err.code, ErrorCode::Malformed);
    }

    #[test]
    fn put_model_round_trips() {
        let req = AggRequest::PutModel {
            round: 3,
            n_samples: 17,
            params: ModelParams::glorot(&[4, 3, 2], 1),
            timings: PhaseTimings::from_array([0.1, 0.2, 0.3, 0.4, 1.0]),
        };
        assert_eq!(AggRequest::decode(&req.encode()).unwrap(), req);
        let resp = AggResponse::RoundDone {
            round: 3,
            more: true,
        };
        assert_eq!(AggResponse::decode(&resp.encode()).unwrap(), resp);
        let err = AggResponse::Error(WireError::new(ErrorCode::RoundMismatch, "x"));
        assert_eq!(AggResponse::decode(&err.encode()).unwrap(), err);
        for req in [
            AggRequest::Register { client_id: 2 },
            AggRequest::GetModel { round: 4 },
            AggRequest::PullDone { round: 4 },
        ] {
            assert_eq!(AggRequest::decode(&req.encode()).unwrap(), req);
        }
        let resp = AggResponse::PullsComplete { round: 4 };
        assert_eq!(AggResponse::decode(&resp.encode()).unwrap(), resp);
    }
}
