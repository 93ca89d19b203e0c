//! Federated training of graph neural networks over partitioned subgraphs,
//! with boundary-vertex embeddings exchanged through a shared embedding
//! server. Supports neighborhood pruning of remote vertices and overlapping
//! the embedding push with the final local epoch.

pub mod error;
pub mod fed;
pub mod gnn;
pub mod graph;
pub mod harness;
pub mod net;
pub mod partition;
pub mod sampler;
pub mod seed;
pub mod store;
pub mod wire;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId, Split};
