use super::ledger::{Channel, CommLedger};
use crate::agg::ExpertId;

/// Simulated peer-to-peer fabric for one exchange phase.
///
/// Holds every client's published (post-local-update, pre-aggregation)
/// expert parameters, indexed by global expert index. Each fetch is metered
/// at the full expert size; there is no multicast de-duplication.
pub struct PeerNetwork<'a> {
    published: Vec<Vec<f64>>,
    owners: Vec<ExpertId>,
    ledger: &'a mut CommLedger,
}

impl<'a> PeerNetwork<'a> {
    pub fn new(published: Vec<Vec<f64>>, owners: Vec<ExpertId>, ledger: &'a mut CommLedger) -> Self {
        debug_assert_eq!(published.len(), owners.len());
        Self {
            published,
            owners,
            ledger,
        }
    }

    /// The requester's own copy of one of its experts, no transfer.
    pub fn local(&self, global: usize) -> &[f64] {
        &self.published[global]
    }

    /// Delivers expert `global` to `requester`.
    pub fn fetch(&mut self, requester: usize, global: usize) -> &[f64] {
        let colocated = self.owners[global].client == requester;
        self.ledger
            .record(Channel::Peer { colocated }, self.published[global].len());
        &self.published[global]
    }
}
