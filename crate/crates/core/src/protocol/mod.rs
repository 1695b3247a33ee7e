//! Round orchestration: local training, embedding averaging, stale
//! aggregation matrices, metered peer-to-peer expert exchange, and the
//! FedAvg and local-only baselines.

mod eval;
mod ledger;
mod network;
mod sim;

pub use eval::{evaluate, Evaluation};
pub use ledger::{
    expected_comm, is_matrix_round, matrix_source_round, scheduled_round, Channel, CommLedger, CommMode,
    CommPrediction, LedgerEntry, ModelSizes,
};
pub use network::PeerNetwork;
pub use sim::{aggregate_embeddings, local_update, ClientState, LocalStats, RoundReport, ServerState, Simulation};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Embedding FedAvg plus proxy-similarity expert mixing.
    #[serde(rename = "fedmoe")]
    FedMoe,
    /// Uniform averaging of the whole model.
    #[serde(rename = "fedavg")]
    FedAvg,
    /// No communication at all.
    LocalOnly,
}

/// Hyper-parameters of the round loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub mode: Mode,
    pub local_epochs: usize,
    pub eta: f64,
    pub batch_size: usize,
    pub top_k: usize,
    /// Peers requested per expert.
    pub p: usize,
    /// Rounds between aggregation-matrix refreshes.
    pub interval: usize,
    pub tau: f64,
    pub freeze_embedding: bool,
    /// When false, step (5) is skipped entirely.
    pub expert_exchange: bool,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.local_epochs == 0 {
            return bad("local_epochs (E) must be >= 1".into());
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return bad(format!("eta must be > 0, got {}", self.eta));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.top_k == 0 {
            return bad("top_k must be >= 1".into());
        }
        if self.interval == 0 {
            return bad("interval (I) must be >= 1".into());
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        Ok(())
    }
}
