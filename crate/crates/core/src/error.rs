use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::wire::ErrorCode;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("malformed dataset: {0}")]
    Format(String),

    #[error("adjacency is not symmetric: edge {0}->{1} has no reverse entry")]
    Asymmetric(u64, u64),

    #[error("node {0} carries more than one split mask")]
    MaskOverlap(u64),

    #[error("node {node} out of range (graph has {num_nodes} nodes)")]
    NodeOutOfRange { node: u64, num_nodes: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("target node {0} is not a local training vertex")]
    BadTarget(u64),

    #[error("no cached embedding for node {node} at layer {layer}")]
    MissingCacheEntry { node: u64, layer: u8 },

    #[error("server returned {code:?}: {message}")]
    Remote { code: ErrorCode, message: String },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("aborted: {0}")]
    Aborted(String),
}

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
