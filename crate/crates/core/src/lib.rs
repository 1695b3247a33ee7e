//! Federated mixture-of-experts simulator.
//!
//! Clients train a three-part model (embedding, linear gate, experts) on
//! label-skewed shards. Each round the server averages embeddings, while
//! experts are mixed peer-to-peer according to a sparse aggregation matrix
//! built from the cosine similarity of the clients' gating proxies. Every
//! transfer is metered so the communication cost can be audited exactly.

pub mod agg;
pub mod checkpoint;
pub mod data;
pub mod experiment;
pub mod gradcheck;
mod error;
pub mod moe;
pub mod nn;
pub mod protocol;
pub mod rng;

pub use error::{Error, Result};
