use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fedmoe::experiment::{self, comm_audit, partition_report, ExperimentConfig};
use fedmoe::gradcheck::{self, GradCheckConfig};

/// Federated mixture-of-experts experiment runner.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write metrics, reports and checkpoints.
    Run { config: PathBuf },
    /// Run 2I rounds in every mode and compare metered traffic with the cost model.
    CommAudit { config: PathBuf },
    /// Print the client x class label counts and the mean pairwise TV distance.
    PartitionReport { config: PathBuf },
    /// Finite-difference check of the network and MoE gradients.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the pretraining recipe and save the embedding checkpoint.
    Pretrain { config: PathBuf, output: PathBuf },
}

/// Exit status for configuration problems; 1 is used for runtime failures
/// and audit mismatches.
const EXIT_INVALID: u8 = 2;

fn is_config_error(err: &anyhow::Error) -> bool {
    matches!(
        err.downcast_ref::<fedmoe::Error>(),
        Some(fedmoe::Error::InvalidConfig(_) | fedmoe::Error::Partition(_) | fedmoe::Error::Json(_))
    )
}

fn load(path: &Path) -> anyhow::Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(path)?)
}

fn run(path: &Path) -> anyhow::Result<bool> {
    let cfg = load(path)?;
    let summary = experiment::run(&cfg)?;
    if let Some(last) = summary.reports.last() {
        println!(
            "{} rounds, final mean test accuracy {:.4} (min {:.4}, max {:.4})",
            last.round,
            last.evaluation.mean_accuracy,
            last.evaluation.min_accuracy(),
            last.evaluation.max_accuracy()
        );
    }
    println!("artifacts written to {}", summary.output_dir.display());
    Ok(true)
}

fn audit(path: &Path) -> anyhow::Result<bool> {
    let cfg = load(path)?;
    let report = comm_audit(&cfg)?;
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "{:<14} {:>5}  {:>23}  {:>23}  {:>23}  verdict",
        "mode", "round", "server_up (met/exp)", "server_down (met/exp)", "p2p (met/exp)"
    )?;
    for r in &report.rows {
        writeln!(
            out,
            "{:<14} {:>5}  {:>11}/{:<11}  {:>11}/{:<11}  {:>11}/{:<11}  {}",
            r.mode.to_string(),
            r.metered.round,
            r.metered.server_up,
            r.expected.server_up,
            r.metered.server_down,
            r.expected.server_down,
            r.metered.p2p,
            r.expected.p2p,
            if r.matches { "match" } else { "MISMATCH" }
        )?;
    }
    for c in &report.cycles {
        writeln!(
            out,
            "{}: server total {} vs closed form {}, steady p2p/round {:?} vs {}, embedding traffic {} -> {}",
            c.mode,
            c.metered_server,
            c.predicted_server,
            c.metered_p2p_per_round.iter().collect::<std::collections::BTreeSet<_>>(),
            c.predicted_p2p_per_round,
            c.embedding_traffic,
            if c.matches { "match" } else { "MISMATCH" }
        )?;
    }
    for (mode, why) in &report.skipped {
        writeln!(out, "{mode}: skipped ({why})")?;
    }
    let ok = report.all_match();
    writeln!(out, "{}", if ok { "all rounds match" } else { "communication MISMATCH" })?;
    Ok(ok)
}

fn partitions(path: &Path) -> anyhow::Result<bool> {
    let cfg = load(path)?;
    let report = partition_report(&cfg)?;
    let mut out = std::io::stdout().lock();
    fedmoe::data::write_partition_csv(&mut out, &report.shards, report.classes)?;
    eprintln!("mean pairwise TV distance: {:.6}", report.mean_tv);
    Ok(true)
}

fn grad_check(instances: usize, seed: u64) -> anyhow::Result<bool> {
    let report = gradcheck::run(&GradCheckConfig {
        instances,
        seed,
        ..GradCheckConfig::default()
    })?;
    for f in report.failures() {
        println!(
            "FAIL {:?} instance {}: relative error {:.3e} ({} parameters)",
            f.suite, f.index, f.max_rel_error, f.params
        );
    }
    println!(
        "{} instances, {} failures, max relative error {:.3e} (tolerance {:.0e}), {} redrawn near kinks",
        report.results.len(),
        report.failures().len(),
        report.max_rel_error(),
        report.tolerance,
        report.redrawn
    );
    Ok(report.passed())
}

fn pretrain(path: &Path, output: &Path) -> anyhow::Result<bool> {
    let cfg = load(path)?;
    let world = experiment::build_world(&cfg)?;
    let net = experiment::pretrain_embedding(&cfg, &world)?;
    experiment::save_embedding(&net, output).with_context(|| format!("saving {}", output.display()))?;
    println!("pretrained embedding written to {}", output.display());
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config } => run(config),
        Command::CommAudit { config } => audit(config),
        Command::PartitionReport { config } => partitions(config),
        Command::GradCheck { instances, seed } => grad_check(*instances, *seed),
        Command::Pretrain { config, output } => pretrain(config, output),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(EXIT_INVALID)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
