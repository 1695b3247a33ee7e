//! Communication metering and the closed-form cost model it is audited
//! against.
//!
//! Counts are scalar parameters. A matrix broadcast sends each client the
//! rows for its own experts as `(index, weight)` pairs, i.e. two scalars per
//! support entry.

use serde::Serialize;

use super::Mode;

/// Scalars moved in one round, per channel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LedgerEntry {
    pub round: usize,
    /// Client -> server, summed over clients.
    pub server_up: u64,
    /// Server -> client, summed over clients.
    pub server_down: u64,
    /// Client -> client expert transfers.
    pub p2p: u64,
    /// The part of `p2p` whose source and destination are the same client.
    pub p2p_colocated: u64,
}

impl LedgerEntry {
    pub fn server_total(&self) -> u64 {
        self.server_up + self.server_down
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    ServerUp,
    ServerDown,
    Peer { colocated: bool },
}

/// Per-round record of every metered transfer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommLedger {
    entries: Vec<LedgerEntry>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn open_round(&mut self, round: usize) {
        self.entries.push(LedgerEntry {
            round,
            ..LedgerEntry::default()
        });
    }

    /// Adds `scalars` to the current round.
    pub(crate) fn record(&mut self, channel: Channel, scalars: usize) {
        let e = self.entries.last_mut().expect("round opened before recording");
        let s = scalars as u64;
        match channel {
            Channel::ServerUp => e.server_up += s,
            Channel::ServerDown => e.server_down += s,
            Channel::Peer { colocated } => {
                e.p2p += s;
                if colocated {
                    e.p2p_colocated += s;
                }
            }
        }
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn last(&self) -> Option<&LedgerEntry> {
        self.entries.last()
    }
}

/// Parameter counts of the three model parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModelSizes {
    pub embedding: usize,
    /// Gating parameters of one client (`n × K`).
    pub gating: usize,
    /// Parameters of one expert.
    pub expert: usize,
}

/// Communication mode for the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CommMode {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedmoe")]
    FedMoe,
    #[serde(rename = "fedmoe_frozen")]
    FedMoeFrozen,
}

impl std::fmt::Display for CommMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CommMode::FedAvg => "fedavg",
            CommMode::FedMoe => "fedmoe",
            CommMode::FedMoeFrozen => "fedmoe_frozen",
        })
    }
}

impl CommMode {
    pub fn of(mode: Mode, frozen_embedding: bool) -> Option<Self> {
        match (mode, frozen_embedding) {
            (Mode::FedAvg, false) => Some(CommMode::FedAvg),
            (Mode::FedMoe, false) => Some(CommMode::FedMoe),
            (Mode::FedMoe, true) => Some(CommMode::FedMoeFrozen),
            _ => None,
        }
    }
}

/// Predicted average per-client, per-round traffic.
///
/// The server figure is kept as an exact fraction
/// `server_scalars_per_cycle / interval` so ledger audits can compare
/// integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CommPrediction {
    /// Server traffic (up + down) of one client over one `I`-round cycle.
    pub server_scalars_per_cycle: u64,
    pub interval: u64,
    /// Steady-state P2P traffic received by one client per round.
    pub p2p_per_client: u64,
}

impl CommPrediction {
    pub fn server_per_client(&self) -> f64 {
        self.server_scalars_per_cycle as f64 / self.interval as f64
    }
}

/// Closed-form per-client, per-round communication.
///
/// * FedAvg: `2(|Θ| + |Π| + K|Φ|)` to the server, nothing peer-to-peer.
/// * FedMoE: `2|Θ| + (|Π| + 2K(P+1)) / I` to the server, `P·K·|Φ|` P2P.
/// * FedMoE with a frozen embedding: drops the `2|Θ|` term.
pub fn expected_comm(sizes: ModelSizes, k: usize, p: usize, interval: usize, mode: CommMode) -> CommPrediction {
    let (theta, pi, phi) = (sizes.embedding as u64, sizes.gating as u64, sizes.expert as u64);
    let (k, p, i) = (k as u64, p as u64, interval.max(1) as u64);
    let matrix = 2 * k * (p + 1);
    match mode {
        CommMode::FedAvg => CommPrediction {
            server_scalars_per_cycle: i * 2 * (theta + pi + k * phi),
            interval: i,
            p2p_per_client: 0,
        },
        CommMode::FedMoe => CommPrediction {
            server_scalars_per_cycle: i * 2 * theta + pi + matrix,
            interval: i,
            p2p_per_client: p * k * phi,
        },
        CommMode::FedMoeFrozen => CommPrediction {
            server_scalars_per_cycle: pi + matrix,
            interval: i,
            p2p_per_client: p * k * phi,
        },
    }
}

/// Rounds in which gatings are uploaded and a new matrix is computed:
/// `1, 1 + I, 1 + 2I, ...`.
pub fn is_matrix_round(round: usize, interval: usize) -> bool {
    round >= 1 && (round - 1) % interval.max(1) == 0
}

/// Round in which the matrix used by `round` was computed (0 = bootstrap
/// identity).
pub fn matrix_source_round(round: usize, interval: usize) -> usize {
    let i = interval.max(1);
    if round <= 1 {
        0
    } else {
        // largest s <= round - 1 with (s - 1) % i == 0
        let s = round - 1;
        s - (s - 1) % i
    }
}

/// Exact traffic the protocol should meter in `round` for clients with
/// `experts_per_client` experts each.
pub fn scheduled_round(
    round: usize,
    sizes: ModelSizes,
    repr_dim: usize,
    experts_per_client: &[usize],
    p: usize,
    interval: usize,
    mode: CommMode,
) -> LedgerEntry {
    let n = experts_per_client.len() as u64;
    let total_experts: usize = experts_per_client.iter().sum();
    let support = (p + 1).min(total_experts) as u64;
    let theta = sizes.embedding as u64;
    let phi = sizes.expert as u64;
    let ks = experts_per_client.iter().map(|&k| k as u64);
    let mut e = LedgerEntry {
        round,
        ..LedgerEntry::default()
    };
    match mode {
        CommMode::FedAvg => {
            let model: u64 = ks.map(|k| theta + repr_dim as u64 * k + k * phi).sum();
            e.server_up = model;
            e.server_down = model;
        }
        CommMode::FedMoe | CommMode::FedMoeFrozen => {
            if mode == CommMode::FedMoe {
                e.server_up += n * theta;
                e.server_down += n * theta;
            }
            if is_matrix_round(round, interval) {
                e.server_up += ks.clone().map(|k| repr_dim as u64 * k).sum::<u64>();
                e.server_down += ks.clone().map(|k| 2 * k * support).sum::<u64>();
            }
            if matrix_source_round(round, interval) > 0 {
                e.p2p = ks.map(|k| k * (support - 1) * phi).sum();
            }
        }
    }
    e
}
