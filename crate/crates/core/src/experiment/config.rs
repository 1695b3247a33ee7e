use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PartitionSpec, Scheme};
use crate::error::{Error, Result};
use crate::moe::Architecture;
use crate::protocol::{Mode, ProtocolConfig};

pub const CONFIG_VERSION: u32 = 1;

/// Number of experts: one value for every client, or one per client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Experts {
    Uniform(usize),
    PerClient(Vec<usize>),
}

impl Experts {
    pub fn per_client(&self, clients: usize) -> Vec<usize> {
        match self {
            Experts::Uniform(k) => vec![*k; clients],
            Experts::PerClient(v) => v.clone(),
        }
    }
}

/// Where the clients' common starting embedding comes from. A missing
/// `path` means "run the built-in pretraining recipe".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingInit {
    Fresh,
    FrozenPretrained {
        #[serde(default)]
        path: Option<PathBuf>,
    },
    Pretrained {
        #[serde(default)]
        path: Option<PathBuf>,
    },
}

impl EmbeddingInit {
    pub fn is_frozen(&self) -> bool {
        matches!(self, EmbeddingInit::FrozenPretrained { .. })
    }

    pub fn pretrained_path(&self) -> Option<&Path> {
        match self {
            EmbeddingInit::Fresh => None,
            EmbeddingInit::FrozenPretrained { path } | EmbeddingInit::Pretrained { path } => path.as_deref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Gaussian mixture with `model.classes` classes in `model.input_dim`
    /// dimensions.
    Synthetic {
        #[serde(default = "default_spread")]
        spread: f64,
        /// Defaults to enough samples for any partition of the configured size.
        #[serde(default)]
        samples: Option<usize>,
        /// Defaults to the experiment seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub scheme: Scheme,
    #[serde(default)]
    pub alpha: Option<f64>,
    pub per_client: usize,
    /// Defaults to the experiment seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Centralised training run that produces a pretrained embedding from
/// samples not assigned to any client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "default_pretrain_samples")]
    pub samples: usize,
    #[serde(default = "default_pretrain_epochs")]
    pub epochs: usize,
    #[serde(default = "default_pretrain_eta")]
    pub eta: f64,
    #[serde(default = "default_pretrain_batch")]
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            samples: default_pretrain_samples(),
            epochs: default_pretrain_epochs(),
            eta: default_pretrain_eta(),
            batch_size: default_pretrain_batch(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_clients")]
    pub clients: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_experts")]
    pub experts: Experts,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Peers requested per expert.
    #[serde(default = "default_p")]
    pub p: usize,
    /// Rounds between aggregation-matrix refreshes.
    #[serde(default = "default_interval")]
    pub interval: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_embedding")]
    pub embedding: EmbeddingInit,
    #[serde(default = "default_true")]
    pub expert_exchange: bool,
    pub model: Architecture,
    pub partition: PartitionConfig,
    pub data: DataSource,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_spread() -> f64 {
    3.0
}
fn default_pretrain_samples() -> usize {
    2000
}
fn default_pretrain_epochs() -> usize {
    5
}
fn default_pretrain_eta() -> f64 {
    0.05
}
fn default_pretrain_batch() -> usize {
    50
}
fn default_clients() -> usize {
    50
}
fn default_rounds() -> usize {
    1000
}
fn default_local_epochs() -> usize {
    5
}
fn default_eta() -> f64 {
    0.01
}
fn default_batch_size() -> usize {
    100
}
fn default_experts() -> Experts {
    Experts::Uniform(4)
}
fn default_top_k() -> usize {
    1
}
fn default_p() -> usize {
    5
}
fn default_interval() -> usize {
    5
}
fn default_tau() -> f64 {
    1.0
}
fn default_mode() -> Mode {
    Mode::FedMoe
}
fn default_embedding() -> EmbeddingInit {
    EmbeddingInit::Fresh
}
fn default_true() -> bool {
    true
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("output")
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

impl ExperimentConfig {
    /// Parses and validates. Unknown keys are errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Copy with every seed and size default written out.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.partition.seed.get_or_insert(self.seed);
        if let DataSource::Synthetic { samples, seed, .. } = &mut out.data {
            seed.get_or_insert(self.seed);
            samples.get_or_insert(self.default_synthetic_samples());
        }
        out
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// `C · N · (per_client + test)`: enough for any label split.
    fn default_synthetic_samples(&self) -> usize {
        let spec = self.partition_spec();
        self.model.classes * self.clients * (spec.per_client + spec.test_per_client())
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            scheme: self.partition.scheme,
            alpha: self.partition.alpha,
            per_client: self.partition.per_client,
            seed: self.partition.seed.unwrap_or(self.seed),
        }
    }

    pub fn experts_per_client(&self) -> Vec<usize> {
        self.experts.per_client(self.clients)
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            mode: self.mode,
            local_epochs: self.local_epochs,
            eta: self.eta,
            batch_size: self.batch_size,
            top_k: self.top_k,
            p: self.p,
            interval: self.interval,
            tau: self.tau,
            freeze_embedding: self.embedding.is_frozen(),
            expert_exchange: self.expert_exchange,
        }
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs: Vec<String> = Vec::new();
        let mut check = |ok: bool, field: &str, msg: String| {
            if !ok {
                errs.push(format!("`{field}`: {msg}"));
            }
        };
        check(
            self.version == CONFIG_VERSION,
            "version",
            format!("unsupported version {}, expected {CONFIG_VERSION}", self.version),
        );
        check(self.clients >= 1, "clients", "must be >= 1".into());
        check(self.rounds >= 1, "rounds", "must be >= 1".into());
        check(self.local_epochs >= 1, "local_epochs", "must be >= 1".into());
        check(positive(self.eta), "eta", format!("must be > 0, got {}", self.eta));
        check(self.batch_size >= 1, "batch_size", "must be >= 1".into());
        check(self.interval >= 1, "interval", "must be >= 1".into());
        check(positive(self.tau), "tau", format!("must be > 0, got {}", self.tau));
        check(self.top_k >= 1, "top_k", "must be >= 1".into());

        let ks = self.experts_per_client();
        if let Experts::PerClient(v) = &self.experts {
            check(
                v.len() == self.clients,
                "experts",
                format!("lists {} clients but `clients` is {}", v.len(), self.clients),
            );
        }
        check(!ks.contains(&0), "experts", "every client needs at least one expert".into());
        let total: usize = ks.iter().sum();
        let min_k = ks.iter().copied().min().unwrap_or(0);
        check(
            self.top_k <= min_k.max(1),
            "top_k",
            format!("{} exceeds the smallest expert count {min_k}", self.top_k),
        );
        if self.mode == Mode::FedMoe {
            check(
                self.p < total.max(1),
                "p",
                format!("{} must be below the total number of experts ({total})", self.p),
            );
        }
        if self.mode == Mode::FedAvg {
            check(
                ks.windows(2).all(|w| w[0] == w[1]),
                "experts",
                "fedavg needs the same expert count on every client".into(),
            );
            check(
                !self.embedding.is_frozen(),
                "embedding",
                "frozen_pretrained cannot be combined with mode fedavg".into(),
            );
        }

        if let Err(e) = self.model.validate() {
            check(false, "model", e.to_string());
        }
        let spec = self.partition_spec();
        if let Err(e) = spec.validate() {
            check(false, "partition", e.to_string());
        }
        if matches!(spec.scheme, Scheme::PathologicalBalanced | Scheme::PathologicalUnbalanced) {
            check(
                self.model.classes >= 2,
                "partition.scheme",
                "pathological schemes need at least 2 classes".into(),
            );
        }
        if let DataSource::Synthetic { spread, samples, .. } = &self.data {
            check(
                *spread >= 0.0 && spread.is_finite(),
                "data.spread",
                format!("must be >= 0, got {spread}"),
            );
            if let Some(n) = samples {
                check(
                    *n >= self.model.classes,
                    "data.samples",
                    format!("need at least one sample per class, got {n}"),
                );
            }
        }
        check(self.pretrain.samples >= 1, "pretrain.samples", "must be >= 1".into());
        check(self.pretrain.epochs >= 1, "pretrain.epochs", "must be >= 1".into());
        check(
            positive(self.pretrain.eta),
            "pretrain.eta",
            format!("must be > 0, got {}", self.pretrain.eta),
        );
        check(self.pretrain.batch_size >= 1, "pretrain.batch_size", "must be >= 1".into());

        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs.join("\n")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "version": 1,
        "model": {"input_dim": 8, "repr_dim": 4, "classes": 4},
        "partition": {"scheme": "dirichlet", "alpha": 0.5, "per_client": 100},
        "data": {"source": "synthetic"}
    }"#;

    #[test]
    fn defaults_are_filled_in() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(
            (cfg.clients, cfg.rounds, cfg.local_epochs, cfg.batch_size, cfg.top_k, cfg.p, cfg.interval),
            (50, 1000, 5, 100, 1, 5, 5)
        );
        assert_eq!(cfg.eta, 0.01);
        assert_eq!(cfg.tau, 1.0);
        assert_eq!(cfg.experts, Experts::Uniform(4));
        assert_eq!(cfg.mode, Mode::FedMoe);
    }

    #[test]
    fn resolved_echo_parses_back_identically() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap().resolved();
        let again = ExperimentConfig::from_json(&cfg.to_json_pretty()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.resolved(), cfg);
        match cfg.data {
            DataSource::Synthetic { samples, seed, .. } => {
                assert_eq!(samples, Some(4 * 50 * 120));
                assert_eq!(seed, Some(0));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("\"version\": 1,", "\"version\": 1, \"learning_rate\": 0.1,");
        let err = ExperimentConfig::from_json(&bad).unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
        let nested = MINIMAL.replace("\"per_client\": 100", "\"per_client\": 100, \"beta\": 1");
        assert!(ExperimentConfig::from_json(&nested).is_err());
    }

    #[test]
    fn field_level_diagnostics() {
        let bad = MINIMAL.replace("\"version\": 1,", "\"version\": 1, \"eta\": -1, \"interval\": 0, \"tau\": 0,");
        let err = ExperimentConfig::from_json(&bad).unwrap_err().to_string();
        for field in ["`eta`", "`interval`", "`tau`"] {
            assert!(err.contains(field), "{err}");
        }
    }

    #[test]
    fn invalid_mode_embedding_combination() {
        let bad = MINIMAL.replace(
            "\"version\": 1,",
            "\"version\": 1, \"mode\": \"fedavg\", \"embedding\": {\"kind\": \"frozen_pretrained\"},",
        );
        let err = ExperimentConfig::from_json(&bad).unwrap_err().to_string();
        assert!(err.contains("`embedding`"), "{err}");
    }

    #[test]
    fn per_client_experts() {
        let cfg = MINIMAL.replace("\"version\": 1,", "\"version\": 1, \"clients\": 3, \"experts\": [1, 2, 3],");
        let cfg = ExperimentConfig::from_json(&cfg).unwrap();
        assert_eq!(cfg.experts_per_client(), vec![1, 2, 3]);
        let short = MINIMAL.replace("\"version\": 1,", "\"version\": 1, \"clients\": 3, \"experts\": [1, 2],");
        assert!(ExperimentConfig::from_json(&short).is_err());
    }
}
