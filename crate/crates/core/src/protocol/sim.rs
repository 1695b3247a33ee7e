use std::io::Write;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::eval::{evaluate, Evaluation};
use super::ledger::{is_matrix_round, Channel, CommLedger, LedgerEntry, ModelSizes};
use super::network::PeerNetwork;
use super::{Mode, ProtocolConfig};
use crate::agg::{aggregation_matrix, expert_layout, stack_proxies, AggregationMatrix, AggregationRow, ExpertId};
use crate::data::ClientShard;
use crate::error::{Error, Result};
use crate::moe::{Architecture, MoEModel};
use crate::nn::DenseNet;
use crate::rng::{SeedTree, STREAM_CLIENT, STREAM_INIT};

pub struct ClientState {
    pub id: usize,
    pub model: MoEModel,
    pub shard: ClientShard,
    /// Global index of this client's first expert.
    pub global_offset: usize,
    /// Aggregation rows for this client's experts, from the latest broadcast.
    pub cached_rows: Vec<AggregationRow>,
    rng: ChaCha8Rng,
}

impl ClientState {
    pub fn new(id: usize, model: MoEModel, shard: ClientShard, global_offset: usize, seed: SeedTree) -> Self {
        let cached_rows = (0..model.num_experts())
            .map(|k| AggregationRow::identity(global_offset + k))
            .collect();
        Self {
            id,
            model,
            shard,
            global_offset,
            cached_rows,
            rng: seed.rng(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalStats {
    pub steps: usize,
    pub mean_loss: f64,
}

/// `E` passes over the client's training shard in shuffled mini-batches,
/// one SGD step per batch.
pub fn local_update(client: &mut ClientState, cfg: &ProtocolConfig) -> Result<LocalStats> {
    let n = client.shard.train.len();
    if n == 0 {
        return Err(Error::InvalidConfig("empty training shard".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut steps = 0;
    let mut total = 0.0;
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut client.rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], usize)> = chunk
                .iter()
                .map(|&i| {
                    let s = &client.shard.train[i];
                    (s.features.as_slice(), s.label)
                })
                .collect();
            total += client
                .model
                .train_step(&batch, cfg.eta, cfg.top_k, cfg.freeze_embedding)?;
            steps += 1;
        }
    }
    Ok(LocalStats {
        steps,
        mean_loss: total / steps as f64,
    })
}

/// Element-wise running mean; exact when all inputs are equal.
fn mean_vectors(vectors: &[Vec<f64>]) -> Vec<f64> {
    let mut mean = vectors[0].clone();
    for (k, v) in vectors.iter().enumerate().skip(1) {
        let inv = 1.0 / (k + 1) as f64;
        for (m, x) in mean.iter_mut().zip(v) {
            *m += (x - *m) * inv;
        }
    }
    mean
}

/// Uniform parameter-wise mean of equally shaped networks.
pub fn aggregate_embeddings(nets: &[&DenseNet]) -> Result<DenseNet> {
    let first = nets
        .first()
        .ok_or_else(|| Error::InvalidConfig("no embeddings to aggregate".into()))?;
    if let Some(i) = nets.iter().position(|n| !n.same_architecture(first)) {
        return Err(Error::dim(format!("embedding {i} parameter count"), first.param_count(), nets[i].param_count()));
    }
    let flat: Vec<Vec<f64>> = nets.iter().map(|n| n.params()).collect();
    let mut out = (*first).clone();
    out.set_params(&mean_vectors(&flat))?;
    Ok(out)
}

pub struct ServerState {
    /// Global embedding `Θ^t`; `None` when embeddings are not synchronised.
    pub embedding: Option<DenseNet>,
    /// Global model for the FedAvg baseline.
    pub global_model: Option<MoEModel>,
    /// Latest aggregation matrix.
    pub matrix: AggregationMatrix,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub evaluation: Evaluation,
    pub mean_train_loss: f64,
    pub ledger: LedgerEntry,
    /// Round in which the aggregation matrix used this round was computed.
    pub matrix_computed_at: Option<usize>,
}

impl RoundReport {
    pub fn matrix_age(&self) -> Option<usize> {
        self.matrix_computed_at.map(|s| self.round - s)
    }

    pub const CSV_HEADER: &'static str = "round,mean_test_acc,min_test_acc,max_test_acc,mean_train_loss,\
server_up_scalars,server_down_scalars,p2p_scalars,matrix_age";

    pub fn write_csv_row<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let age = self.matrix_age().map(|a| a.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{},{},{},{}",
            self.round,
            self.evaluation.mean_accuracy,
            self.evaluation.min_accuracy(),
            self.evaluation.max_accuracy(),
            self.mean_train_loss,
            self.ledger.server_up,
            self.ledger.server_down,
            self.ledger.p2p,
            age
        )
    }
}

/// The whole federation: clients, server, and the communication ledger.
pub struct Simulation {
    pub clients: Vec<ClientState>,
    pub server: ServerState,
    pub config: ProtocolConfig,
    pub ledger: CommLedger,
    layout: Vec<ExpertId>,
}

impl Simulation {
    /// Builds clients with `experts_per_client[i]` experts each. All clients
    /// start from the same embedding: `pretrained` if given, otherwise a
    /// seeded fresh network.
    pub fn new(
        arch: &Architecture,
        experts_per_client: &[usize],
        shards: Vec<ClientShard>,
        config: ProtocolConfig,
        seed: u64,
        pretrained: Option<DenseNet>,
    ) -> Result<Self> {
        config.validate()?;
        arch.validate()?;
        if shards.len() != experts_per_client.len() || shards.is_empty() {
            return Err(Error::dim("client shards vs expert counts", experts_per_client.len(), shards.len()));
        }
        let total: usize = experts_per_client.iter().sum();
        let uniform = experts_per_client.iter().all(|&k| k == experts_per_client[0]);
        match config.mode {
            Mode::FedAvg if !uniform => {
                return Err(Error::InvalidConfig("FedAvg needs the same K on every client".into()));
            }
            Mode::FedAvg if config.freeze_embedding => {
                return Err(Error::InvalidConfig("a frozen embedding is only supported with fedmoe or local_only".into()));
            }
            Mode::FedMoe if config.p >= total => {
                return Err(Error::InvalidConfig(format!(
                    "P = {} must be below the total number of experts ({total})",
                    config.p
                )));
            }
            _ => {}
        }
        if let Some(p) = &pretrained {
            let expect = arch.init_embedding(&mut SeedTree::new(0).rng())?;
            if !p.same_architecture(&expect) {
                return Err(Error::InvalidConfig("pretrained embedding does not match model dimensions".into()));
            }
        }

        let init = SeedTree::new(seed).child(STREAM_INIT);
        let streams = SeedTree::new(seed).child(STREAM_CLIENT);
        let theta0 = match pretrained {
            Some(p) => p,
            None => arch.init_embedding(&mut init.child(0).rng())?,
        };

        let mut clients = Vec::with_capacity(shards.len());
        let mut offset = 0;
        for (i, (shard, &k)) in shards.into_iter().zip(experts_per_client).enumerate() {
            let mut model = MoEModel::init(arch, k, &mut init.child(1 + i as u64).rng())?;
            model.embedding = theta0.clone();
            clients.push(ClientState::new(i, model, shard, offset, streams.child(i as u64)));
            offset += k;
        }

        let global_model = if config.mode == Mode::FedAvg {
            let mut g = MoEModel::init(arch, experts_per_client[0], &mut init.child(0).rng())?;
            g.embedding = theta0.clone();
            Some(g)
        } else {
            None
        };
        let embedding = (config.mode == Mode::FedMoe && !config.freeze_embedding).then_some(theta0);

        Ok(Self {
            clients,
            server: ServerState {
                embedding,
                global_model,
                matrix: AggregationMatrix::identity(total),
                round: 0,
            },
            config,
            ledger: CommLedger::new(),
            layout: expert_layout(experts_per_client),
        })
    }

    pub fn experts_per_client(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.model.num_experts()).collect()
    }

    /// Parameter counts of client 0's model.
    pub fn model_sizes(&self) -> ModelSizes {
        let m = &self.clients[0].model;
        ModelSizes {
            embedding: m.embedding.param_count(),
            gating: m.gating.data().len(),
            expert: m.experts[0].param_count(),
        }
    }

    fn syncs_embedding(&self) -> bool {
        self.server.embedding.is_some()
    }

    /// Runs the next round and returns its report.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let t = self.server.round + 1;
        self.ledger.open_round(t);
        let (loss, matrix_computed_at) = match self.config.mode {
            Mode::FedMoe => self.fedmoe_round(t)?,
            Mode::FedAvg => (self.fedavg_round(t)?, None),
            Mode::LocalOnly => (self.local_updates(t)?, None),
        };
        self.server.round = t;
        let evaluation = self.evaluate()?;
        Ok(RoundReport {
            round: t,
            evaluation,
            mean_train_loss: loss,
            ledger: *self.ledger.last().expect("round opened"),
            matrix_computed_at,
        })
    }

    /// Runs `rounds` rounds, handing each report to `on_round`.
    pub fn run<F>(&mut self, rounds: usize, mut on_round: F) -> Result<Vec<RoundReport>>
    where
        F: FnMut(&RoundReport) -> Result<()>,
    {
        let mut reports = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let r = self.run_round()?;
            on_round(&r)?;
            reports.push(r);
        }
        Ok(reports)
    }

    /// Step (2): every client trains locally. Returns the mean training loss.
    fn local_updates(&mut self, t: usize) -> Result<f64> {
        let cfg = &self.config;
        let results: Vec<Result<LocalStats>> = self
            .clients
            .par_iter_mut()
            .map(|c| {
                local_update(c, cfg).map_err(|e| Error::Client {
                    client: c.id,
                    round: t,
                    source: Box::new(e),
                })
            })
            .collect();
        let mut total = 0.0;
        for r in results {
            total += r?.mean_loss;
        }
        Ok(total / self.clients.len() as f64)
    }

    /// Step (1): install `Θ^{t-1}` on every client.
    pub(crate) fn broadcast_embedding(&mut self) {
        if let Some(theta) = &self.server.embedding {
            for c in &mut self.clients {
                c.model.embedding = theta.clone();
                self.ledger.record(Channel::ServerDown, theta.param_count());
            }
        }
    }

    fn fedmoe_round(&mut self, t: usize) -> Result<(f64, Option<usize>)> {
        // (1)
        self.broadcast_embedding();
        // (2)
        let loss = self.local_updates(t)?;
        // (3)
        let uploads: Option<Vec<DenseNet>> = self.syncs_embedding().then(|| {
            self.clients
                .iter()
                .map(|c| {
                    self.ledger.record(Channel::ServerUp, c.model.embedding.param_count());
                    c.model.embedding.clone()
                })
                .collect()
        });
        // (4)
        let matrix_round = is_matrix_round(t, self.config.interval);
        let gatings: Vec<_> = if matrix_round {
            self.clients
                .iter()
                .map(|c| {
                    self.ledger.record(Channel::ServerUp, c.model.gating.data().len());
                    c.model.gating.clone()
                })
                .collect()
        } else {
            Vec::new()
        };
        // (5) with the stale matrix
        let used = self.server.matrix.computed_at_round;
        if self.config.expert_exchange {
            self.exchange_experts()?;
        }
        // (6)
        if let Some(uploads) = uploads {
            let refs: Vec<&DenseNet> = uploads.iter().collect();
            self.server.embedding = Some(aggregate_embeddings(&refs)?);
        }
        // (7) takes effect next round
        if matrix_round {
            let refs: Vec<_> = gatings.iter().collect();
            let bank = stack_proxies(&refs)?;
            let a = aggregation_matrix(&bank, self.config.p, self.config.tau, t)?;
            for c in &mut self.clients {
                let k = c.model.num_experts();
                c.cached_rows = a.rows[c.global_offset..c.global_offset + k].to_vec();
                let pairs: usize = c.cached_rows.iter().map(|r| r.support.len()).sum();
                self.ledger.record(Channel::ServerDown, 2 * pairs);
            }
            self.server.matrix = a;
        }
        Ok((loss, Some(used)))
    }

    /// Step (5): every client pulls the support experts of each of its
    /// experts and replaces it with the weighted mix. All mixes read the
    /// published pre-aggregation parameters.
    fn exchange_experts(&mut self) -> Result<()> {
        let published: Vec<Vec<f64>> = self
            .clients
            .iter()
            .flat_map(|c| c.model.experts.iter().map(DenseNet::params))
            .collect();
        let mut net = PeerNetwork::new(published, self.layout.clone(), &mut self.ledger);
        for c in &mut self.clients {
            for (k, row) in c.cached_rows.iter().enumerate() {
                let own = c.global_offset + k;
                if row.support == [own] {
                    continue;
                }
                let mut mixed = vec![0.0; c.model.experts[k].param_count()];
                for (&j, &w) in row.support.iter().zip(&row.weights) {
                    let v = if j == own { net.local(j) } else { net.fetch(c.id, j) };
                    for (m, x) in mixed.iter_mut().zip(v) {
                        *m += w * x;
                    }
                }
                c.model.experts[k].set_params(&mixed)?;
            }
        }
        Ok(())
    }

    fn fedavg_round(&mut self, t: usize) -> Result<f64> {
        let global = self.server.global_model.as_ref().expect("fedavg keeps a global model");
        let size = global.param_count();
        for c in &mut self.clients {
            c.model = global.clone();
            self.ledger.record(Channel::ServerDown, size);
        }
        let loss = self.local_updates(t)?;
        let uploads: Vec<Vec<f64>> = self
            .clients
            .iter()
            .map(|c| {
                self.ledger.record(Channel::ServerUp, size);
                c.model.params()
            })
            .collect();
        let mut next = self.clients[0].model.clone();
        next.set_params(&mean_vectors(&uploads))?;
        self.server.global_model = Some(next);
        Ok(loss)
    }

    /// The model each client would use right now: its own gate and experts
    /// with the current global embedding (FedMoE), the global model (FedAvg),
    /// or its local model.
    pub fn deployed_models(&self) -> Vec<MoEModel> {
        self.clients
            .iter()
            .map(|c| match (&self.server.global_model, &self.server.embedding) {
                (Some(g), _) => g.clone(),
                (None, Some(theta)) => {
                    let mut m = c.model.clone();
                    m.embedding = theta.clone();
                    m
                }
                (None, None) => c.model.clone(),
            })
            .collect()
    }

    pub fn evaluate(&self) -> Result<Evaluation> {
        let models = self.deployed_models();
        let refs: Vec<&MoEModel> = models.iter().collect();
        let tests: Vec<&[_]> = self.clients.iter().map(|c| c.shard.test.as_slice()).collect();
        evaluate(&refs, &tests, self.config.top_k)
    }
}
