//! File-described experiments: data loading, partitioning, pretraining, the
//! round loop, artifact writing and the communication audit.

mod audit;
mod config;

pub use audit::{comm_audit, AuditReport, AuditRow, CycleCheck};
pub use config::{
    DataSource, EmbeddingInit, ExperimentConfig, Experts, PartitionConfig, PretrainConfig, CONFIG_VERSION,
};

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::data::{label_counts, load_idx, make_synthetic, mean_pairwise_tv, partition, ClientShard, Dataset, Sample};
use crate::error::{Error, Result};
use crate::moe::MoEModel;
use crate::nn::DenseNet;
use crate::protocol::{RoundReport, Simulation};
use crate::rng::{SeedTree, STREAM_PRETRAIN};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CLIENT_REPORT_FILE: &str = "clients.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const ERROR_FILE: &str = "error.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Loads or generates the dataset and checks it against the model shape.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = match &cfg.data {
        DataSource::Synthetic { .. } => {
            let resolved = cfg.resolved();
            let DataSource::Synthetic { spread, samples, seed } = resolved.data else {
                unreachable!()
            };
            make_synthetic(
                cfg.model.classes,
                cfg.model.input_dim,
                samples.expect("resolved"),
                spread,
                seed.expect("resolved"),
            )?
        }
        DataSource::Idx { images, labels } => load_idx(images, labels)?,
    };
    if ds.dim() != cfg.model.input_dim {
        return Err(Error::InvalidConfig(format!(
            "`model.input_dim` is {} but the data has {} features",
            cfg.model.input_dim,
            ds.dim()
        )));
    }
    if ds.classes() > cfg.model.classes {
        return Err(Error::InvalidConfig(format!(
            "`model.classes` is {} but the data has {} classes",
            cfg.model.classes,
            ds.classes()
        )));
    }
    Ok(ds)
}

/// Re-labels `ds` to the configured class count so label histograms line up.
fn with_model_classes(ds: Dataset, classes: usize) -> Result<Dataset> {
    if ds.classes() == classes {
        Ok(ds)
    } else {
        Dataset::new(ds.samples().to_vec(), classes)
    }
}

pub struct World {
    pub dataset: Dataset,
    pub shards: Vec<ClientShard>,
}

pub fn build_world(cfg: &ExperimentConfig) -> Result<World> {
    cfg.validate()?;
    let dataset = with_model_classes(load_dataset(cfg)?, cfg.model.classes)?;
    let shards = partition(&dataset, cfg.clients, &cfg.partition_spec())?;
    Ok(World { dataset, shards })
}

/// Samples of `world` not assigned to any client, in a seeded order.
pub fn held_out(world: &World, seed: u64) -> Vec<Sample> {
    let used: HashSet<usize> = world
        .shards
        .iter()
        .flat_map(|s| s.train_indices.iter().chain(&s.test_indices).copied())
        .collect();
    let mut free: Vec<usize> = (0..world.dataset.len()).filter(|i| !used.contains(i)).collect();
    free.shuffle(&mut SeedTree::new(seed).child(STREAM_PRETRAIN).child(0).rng());
    free.into_iter().map(|i| world.dataset.samples()[i].clone()).collect()
}

/// The pretraining recipe: a single-expert model trained centrally on
/// held-out samples; its embedding is kept.
pub fn pretrain_embedding(cfg: &ExperimentConfig, world: &World) -> Result<DenseNet> {
    let mut data = held_out(world, cfg.seed);
    data.truncate(cfg.pretrain.samples);
    if data.is_empty() {
        return Err(Error::InvalidConfig(
            "pretraining needs samples outside the client shards; increase `data.samples`".into(),
        ));
    }
    let tree = SeedTree::new(cfg.seed).child(STREAM_PRETRAIN);
    let mut model = MoEModel::init(&cfg.model, 1, &mut tree.child(1).rng())?;
    let mut rng = tree.child(2).rng();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.pretrain.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.pretrain.batch_size) {
            let batch: Vec<(&[f64], usize)> = chunk
                .iter()
                .map(|&i| (data[i].features.as_slice(), data[i].label))
                .collect();
            model.train_step(&batch, cfg.pretrain.eta, 1, false)?;
        }
    }
    log::info!("pretrained embedding on {} held-out samples", data.len());
    Ok(model.embedding)
}

pub fn save_embedding(net: &DenseNet, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::new();
    ck.insert_net("embedding", net);
    ck.save(path)
}

/// Reads the `embedding.*` tensors of a checkpoint into a network shaped
/// for `cfg.model`.
pub fn load_embedding(cfg: &ExperimentConfig, path: &Path) -> Result<DenseNet> {
    let mut net = cfg.model.init_embedding(&mut SeedTree::new(0).rng())?;
    Checkpoint::load(path)?.load_net("embedding", &mut net)?;
    Ok(net)
}

fn initial_embedding(cfg: &ExperimentConfig, world: &World) -> Result<Option<DenseNet>> {
    match &cfg.embedding {
        EmbeddingInit::Fresh => Ok(None),
        e => match e.pretrained_path() {
            Some(p) => load_embedding(cfg, p).map(Some),
            None => pretrain_embedding(cfg, world).map(Some),
        },
    }
}

pub fn build_simulation(cfg: &ExperimentConfig) -> Result<Simulation> {
    let world = build_world(cfg)?;
    let pretrained = initial_embedding(cfg, &world)?;
    Simulation::new(
        &cfg.model,
        &cfg.experts_per_client(),
        world.shards,
        cfg.protocol(),
        cfg.seed,
        pretrained,
    )
}

/// Runs the experiment without touching the filesystem (unless the
/// embedding is loaded from a checkpoint).
pub fn run_in_memory(cfg: &ExperimentConfig) -> Result<Vec<RoundReport>> {
    let mut sim = build_simulation(cfg)?;
    sim.run(cfg.rounds, |_| Ok(()))
}

#[derive(Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub reports: Vec<RoundReport>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Runs the experiment and writes, into `cfg.output_dir`: the resolved
/// config, per-round metrics, the per-client report and final checkpoints.
/// On a runtime failure the metrics written so far are kept and an error
/// record is added.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let resolved = cfg.resolved();
    let cfg_path = dir.join(RESOLVED_CONFIG_FILE);
    fs::write(&cfg_path, resolved.to_json_pretty() + "\n").map_err(|e| Error::io(&cfg_path, e))?;
    let _ = fs::remove_file(dir.join(ERROR_FILE));

    let metrics_path = dir.join(METRICS_FILE);
    let mut metrics = create(&metrics_path)?;
    let io = |e| Error::io(&metrics_path, e);
    writeln!(metrics, "{}", RoundReport::CSV_HEADER).map_err(io)?;

    let mut reached = 0;
    let result = build_simulation(&resolved).and_then(|mut sim| {
        let reports = sim.run(resolved.rounds, |r| {
            r.write_csv_row(&mut metrics).and_then(|_| metrics.flush()).map_err(io)?;
            reached = r.round;
            log::info!(
                "round {:>4}  acc {:.4}  loss {:.4}",
                r.round,
                r.evaluation.mean_accuracy,
                r.mean_train_loss
            );
            Ok(())
        })?;
        Ok((sim, reports))
    });
    metrics.flush().map_err(io)?;

    let (sim, reports) = match result {
        Ok(v) => v,
        Err(e) => {
            let record = serde_json::json!({
                "last_completed_round": reached,
                "error": e.to_string(),
            });
            let p = dir.join(ERROR_FILE);
            fs::write(&p, record.to_string() + "\n").map_err(|err| Error::io(&p, err))?;
            return Err(e);
        }
    };

    write_client_report(&dir.join(CLIENT_REPORT_FILE), &sim, reports.last())?;
    let ck_dir = dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    for (i, model) in sim.deployed_models().iter().enumerate() {
        model.to_checkpoint().save(&ck_dir.join(format!("client_{i}.json")))?;
    }
    Ok(RunSummary {
        output_dir: dir,
        reports,
    })
}

fn write_client_report(path: &Path, sim: &Simulation, last: Option<&RoundReport>) -> Result<()> {
    let eval = match last {
        Some(r) => r.evaluation.clone(),
        None => sim.evaluate()?,
    };
    let widest = sim.experts_per_client().into_iter().max().unwrap_or(0);
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    let mut header = String::from("client_id,test_acc");
    for j in 0..widest {
        header.push_str(&format!(",expert_{j}"));
    }
    writeln!(out, "{header}").map_err(io)?;
    for (i, (acc, hist)) in eval.per_client.iter().zip(&eval.activations).enumerate() {
        let mut row = format!("{i},{acc:?}");
        for j in 0..widest {
            row.push(',');
            if let Some(c) = hist.get(j) {
                row.push_str(&c.to_string());
            }
        }
        writeln!(out, "{row}").map_err(io)?;
    }
    out.flush().map_err(io)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionReport {
    pub shards: Vec<ClientShard>,
    pub classes: usize,
    /// Training label counts, one row per client.
    pub counts: Vec<Vec<usize>>,
    pub mean_tv: f64,
}

pub fn partition_report(cfg: &ExperimentConfig) -> Result<PartitionReport> {
    let world = build_world(cfg)?;
    let classes = world.dataset.classes();
    let counts = world.shards.iter().map(|s| label_counts(&s.train, classes)).collect();
    Ok(PartitionReport {
        mean_tv: mean_pairwise_tv(&world.shards, classes),
        shards: world.shards,
        classes,
        counts,
    })
}
