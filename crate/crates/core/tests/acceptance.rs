//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use fedmoe::agg::{
    aggregate_experts, aggregation_matrix, request_sets, similarity, stack_proxies, weights,
};
use fedmoe::experiment::{self, comm_audit, partition_report, run_in_memory, ExperimentConfig};
use fedmoe::gradcheck::{self, GradCheckConfig};
use fedmoe::nn::Matrix;
use fedmoe::protocol::{is_matrix_round, RoundReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn within(elapsed: Duration, limit: Duration) -> (bool, String) {
    (elapsed < limit, format!("{:.2}s of {}s", elapsed.as_secs_f64(), limit.as_secs()))
}

// ---------------------------------------------------------------------------
// Shared experiment settings

/// The synthetic heterogeneity task shared by criteria 5-7.
fn task(seed: u64, mode: &str, interval: usize, batch: usize, embedding: &str) -> ExperimentConfig {
    let text = format!(
        r#"{{
        "version": 1,
        "seed": {seed},
        "clients": 8,
        "rounds": 60,
        "local_epochs": 2,
        "eta": 0.05,
        "batch_size": {batch},
        "experts": 2,
        "top_k": 1,
        "p": 2,
        "interval": {interval},
        "tau": 1.0,
        "mode": "{mode}",
        "embedding": {embedding},
        "model": {{"input_dim": 8, "repr_dim": 16, "classes": 4}},
        "partition": {{"scheme": "dirichlet", "alpha": 0.1, "per_client": 200}},
        "data": {{"source": "synthetic", "spread": 3.0}}
    }}"#
    );
    ExperimentConfig::from_json(&text).expect("task config is valid")
}

const FRESH: &str = r#"{"kind": "fresh"}"#;
const FROZEN: &str = r#"{"kind": "frozen_pretrained"}"#;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn final_accuracy(reports: &[RoundReport]) -> f64 {
    reports.last().expect("at least one round").evaluation.mean_accuracy
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(mut v: Vec<usize>) -> f64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

// ---------------------------------------------------------------------------
// 1. Aggregation oracles

fn oracle_cosine(a: &[f64], b: &[f64], same: bool) -> f64 {
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if same {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    ab / (na * nb).sqrt()
}

/// `j != i` is requested by `i` iff fewer than `p` other candidates beat it,
/// where `k` beats `j` on a higher similarity or an equal one at a lower index.
fn oracle_request_set(r: &Matrix, i: usize, p: usize) -> Vec<usize> {
    let m = r.rows();
    let mut set = vec![i];
    for j in (0..m).filter(|&j| j != i) {
        let beaten_by = (0..m)
            .filter(|&k| k != i && k != j)
            .filter(|&k| r.get(i, k) > r.get(i, j) || (r.get(i, k) == r.get(i, j) && k < j))
            .count();
        if beaten_by < p {
            set.push(j);
        }
    }
    set.sort_unstable();
    set
}

fn oracle_weights(r: &Matrix, i: usize, support: &[usize], tau: f64) -> Vec<f64> {
    let z: f64 = support.iter().map(|&k| (r.get(i, k) / tau).exp()).sum();
    support.iter().map(|&j| (r.get(i, j) / tau).exp() / z).collect()
}

fn random_proxy_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let style = rng.random_range(0..4);
    let data = (0..rows * cols)
        .map(|_| match style {
            // coarse grid: frequent exact ties and occasional zero columns
            0 => rng.random_range(-1..=1) as f64,
            1 => rng.random_range(0..=1) as f64 * 0.5,
            _ => rng.random_range(-2.0..2.0),
        })
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut mismatches = Vec::new();
    let mut max_dev: f64 = 0.0;
    let seeds = 1000;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=4);
        let clients = rng.random_range(1..=3);
        let mut ks: Vec<usize> = (0..clients).map(|_| rng.random_range(1..=3)).collect();
        while ks.iter().sum::<usize>() > 6 {
            let last = ks.len() - 1;
            if ks[last] > 1 {
                ks[last] -= 1;
            } else {
                ks.pop();
            }
        }
        let m: usize = ks.iter().sum();
        let p = rng.random_range(0..m);
        let tau = [0.1, 0.5, 1.0, 2.0][rng.random_range(0..4)];
        let gatings: Vec<Matrix> = ks.iter().map(|&k| random_proxy_matrix(&mut rng, n, k)).collect();
        let refs: Vec<&Matrix> = gatings.iter().collect();
        let bank = stack_proxies(&refs).unwrap();

        // proxies in client-major order, straight from the gating columns
        let proxies: Vec<Vec<f64>> = gatings
            .iter()
            .flat_map(|g| (0..g.cols()).map(move |c| (0..g.rows()).map(|r| g.get(r, c)).collect()))
            .collect();

        let r = similarity(&bank);
        for i in 0..m {
            for j in 0..m {
                let dev = (r.get(i, j) - oracle_cosine(&proxies[i], &proxies[j], i == j)).abs();
                max_dev = max_dev.max(dev);
                if dev > 1e-12 {
                    mismatches.push(format!("seed {seed}: similarity[{i}][{j}]"));
                }
            }
        }

        let sets = request_sets(&r, p);
        let rows = weights(&r, &sets, tau).unwrap();
        let full = aggregation_matrix(&bank, p, tau, 1).unwrap();
        for i in 0..m {
            let expect = oracle_request_set(&r, i, p);
            if sets[i] != expect || full.rows[i].support != expect {
                mismatches.push(format!("seed {seed}: request set {i}: {:?} vs {expect:?}", sets[i]));
                continue;
            }
            let w = oracle_weights(&r, i, &expect, tau);
            for (a, b) in rows[i].weights.iter().zip(&w) {
                max_dev = max_dev.max((a - b).abs());
                if (a - b).abs() > 1e-12 {
                    mismatches.push(format!("seed {seed}: weight row {i}"));
                }
            }
            if full.rows[i].weights != rows[i].weights {
                mismatches.push(format!("seed {seed}: pipeline weights row {i}"));
            }
        }

        // aggregation against a dense product with the oracle weights
        let len = rng.random_range(1..=5);
        let experts: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..len).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let out = aggregate_experts(&experts, &full).unwrap();
        for i in 0..m {
            let support = oracle_request_set(&r, i, p);
            let w = oracle_weights(&r, i, &support, tau);
            for q in 0..len {
                let mut dense = 0.0;
                for j in 0..m {
                    let a = support.iter().position(|&s| s == j).map_or(0.0, |k| w[k]);
                    dense += a * experts[j][q];
                }
                let dev = (out[i][q] - dense).abs();
                max_dev = max_dev.max(dev);
                if dev > 1e-12 {
                    mismatches.push(format!("seed {seed}: aggregate[{i}][{q}]"));
                }
            }
        }
    }
    let (fast, time) = within(start.elapsed(), Duration::from_secs(10));
    Outcome {
        pass: mismatches.is_empty() && fast,
        detail: format!(
            "{seeds} seeds, M <= 6, {} mismatches, max deviation {max_dev:.1e}, {time}{}",
            mismatches.len(),
            mismatches.first().map(|m| format!("; first: {m}")).unwrap_or_default()
        ),
    }
}

// ---------------------------------------------------------------------------
// 2. Gradient correctness

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let cfg = GradCheckConfig {
        instances: 100,
        seed: 2024,
        step: 1e-6,
        tolerance: 1e-4,
    };
    let report = gradcheck::run(&cfg).expect("grad check runs");
    let moe = report
        .results
        .iter()
        .filter(|r| matches!(r.suite, gradcheck::Suite::MoE))
        .count();
    let (fast, time) = within(start.elapsed(), Duration::from_secs(60));
    Outcome {
        pass: report.passed() && moe >= 100 && fast,
        detail: format!(
            "{} instances ({moe} MoE), {} failures, max rel error {:.2e}, {} redrawn, {time}",
            report.results.len(),
            report.failures().len(),
            report.max_rel_error(),
            report.redrawn
        ),
    }
}

// ---------------------------------------------------------------------------
// 3. Communication exactness

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut cfg = task(7, "fedmoe", 5, 20, FRESH);
    cfg.partition.per_client = 60;
    let report = comm_audit(&cfg).expect("audit runs");
    let bad_rows = report.rows.iter().filter(|r| !r.matches).count();
    let frozen_embedding: u64 = report
        .cycles
        .iter()
        .filter(|c| c.mode == fedmoe::protocol::CommMode::FedMoeFrozen)
        .map(|c| c.embedding_traffic)
        .sum();
    let modes = report.cycles.len();
    let (fast, time) = within(start.elapsed(), Duration::from_secs(30));
    Outcome {
        pass: report.all_match() && modes == 3 && report.rows.len() == 3 * 2 * cfg.interval && frozen_embedding == 0 && fast,
        detail: format!(
            "{} rounds x {modes} modes, {bad_rows} mismatched rounds, frozen embedding traffic {frozen_embedding}, {time}",
            report.rounds
        ),
    }
}

// ---------------------------------------------------------------------------
// 4. P = 0 ablation

fn criterion_4() -> Outcome {
    let mut cfg = task(11, "fedmoe", 5, 20, FRESH);
    cfg.rounds = 12;
    cfg.partition.per_client = 60;
    cfg.p = 0;
    let mut with_p2p = experiment::build_simulation(&cfg).unwrap();
    with_p2p.run(cfg.rounds, |_| Ok(())).unwrap();
    cfg.expert_exchange = false;
    let mut without = experiment::build_simulation(&cfg).unwrap();
    without.run(cfg.rounds, |_| Ok(())).unwrap();

    let identical = with_p2p
        .clients
        .iter()
        .zip(&without.clients)
        .all(|(a, b)| a.model.experts == b.model.experts);
    let identity = with_p2p.server.matrix.is_identity() && with_p2p.server.matrix.computed_at_round > 0;
    let p2p: u64 = with_p2p.ledger.entries().iter().map(|e| e.p2p).sum();
    Outcome {
        pass: identical && identity && p2p == 0,
        detail: format!(
            "experts bit-identical: {identical}, A = I (round {}): {identity}, p2p scalars {p2p}",
            with_p2p.server.matrix.computed_at_round
        ),
    }
}

// ---------------------------------------------------------------------------
// 5. Directional heterogeneity result

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut moe = Vec::new();
    let mut avg = Vec::new();
    for &seed in &SEEDS {
        moe.push(final_accuracy(&run_in_memory(&task(seed, "fedmoe", 5, 10, FRESH)).unwrap()));
        avg.push(final_accuracy(&run_in_memory(&task(seed, "fedavg", 5, 10, FRESH)).unwrap()));
    }
    let gap = mean(&moe) - mean(&avg);
    let (fast, time) = within(start.elapsed(), Duration::from_secs(300));
    Outcome {
        pass: gap >= 0.03 && fast,
        detail: format!(
            "fedmoe {:.4} vs fedavg {:.4}, gap {:+.2} points (need >= +3), per seed {:?} vs {:?}, {time}",
            mean(&moe),
            mean(&avg),
            100.0 * gap,
            moe.iter().map(|a| (a * 1000.0).round() / 10.0).collect::<Vec<_>>(),
            avg.iter().map(|a| (a * 1000.0).round() / 10.0).collect::<Vec<_>>(),
        ),
    }
}

// ---------------------------------------------------------------------------
// 6. Staleness insensitivity

fn criterion_6() -> Outcome {
    let mut means = Vec::new();
    for interval in [1, 5, 10] {
        let accs: Vec<f64> = SEEDS
            .iter()
            .map(|&s| final_accuracy(&run_in_memory(&task(s, "fedmoe", interval, 10, FRESH)).unwrap()))
            .collect();
        means.push((interval, mean(&accs)));
    }
    let hi = means.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
    let lo = means.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
    Outcome {
        pass: hi - lo <= 0.03,
        detail: format!(
            "final accuracy by I: {}; spread {:.2} points (limit 3)",
            means
                .iter()
                .map(|(i, a)| format!("I={i}: {a:.4}"))
                .collect::<Vec<_>>()
                .join(", "),
            100.0 * (hi - lo)
        ),
    }
}

// ---------------------------------------------------------------------------
// 7. Pretrained acceleration

fn rounds_to(reports: &[RoundReport], target: f64) -> usize {
    reports
        .iter()
        .find(|r| r.evaluation.mean_accuracy >= target)
        .map_or(reports.len() + 1, |r| r.round)
}

fn criterion_7() -> Outcome {
    let mut fresh_rounds = Vec::new();
    let mut frozen_rounds = Vec::new();
    let mut embedding_traffic = 0u64;
    for &seed in &SEEDS {
        let fresh = run_in_memory(&task(seed, "fedmoe", 5, 100, FRESH)).unwrap();
        let cfg = task(seed, "fedmoe", 5, 100, FROZEN);
        let mut sim = experiment::build_simulation(&cfg).unwrap();
        let frozen = sim.run(cfg.rounds, |_| Ok(())).unwrap();
        let target = 0.9 * final_accuracy(&fresh);
        fresh_rounds.push(rounds_to(&fresh, target));
        frozen_rounds.push(rounds_to(&frozen, target));

        // whatever the server moved beyond gatings and matrix rows
        let n = cfg.model.repr_dim as u64;
        let (clients, k, p) = (cfg.clients as u64, 2u64, cfg.p as u64);
        for e in sim.ledger.entries() {
            let (up, down) = if is_matrix_round(e.round, cfg.interval) {
                (clients * n * k, clients * 2 * k * (p + 1))
            } else {
                (0, 0)
            };
            embedding_traffic += e.server_up.abs_diff(up) + e.server_down.abs_diff(down);
        }
    }
    let (mf, mz) = (median(fresh_rounds.clone()), median(frozen_rounds.clone()));
    Outcome {
        pass: mz < mf && embedding_traffic == 0,
        detail: format!(
            "median rounds to 90% of fresh final: frozen {mz} vs fresh {mf} (per seed {frozen_rounds:?} vs {fresh_rounds:?}), server embedding traffic {embedding_traffic}"
        ),
    }
}

// ---------------------------------------------------------------------------
// 8. Determinism

fn criterion_8() -> Outcome {
    let mut identical = 0;
    let mut checked = 0;
    let mut notes = Vec::new();
    for (mode, embedding) in [("fedmoe", FRESH), ("fedavg", FRESH), ("local_only", FRESH), ("fedmoe", FROZEN)] {
        let mut cfg = task(5, mode, 3, 20, embedding);
        cfg.rounds = 8;
        cfg.partition.per_client = 60;
        let mut bytes = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().unwrap();
            cfg.output_dir = dir.path().to_path_buf();
            experiment::run(&cfg).unwrap();
            bytes.push(std::fs::read(dir.path().join(experiment::METRICS_FILE)).unwrap());
        }
        checked += 1;
        if bytes[0] == bytes[1] && !bytes[0].is_empty() {
            identical += 1;
        } else {
            notes.push(mode);
        }
    }
    Outcome {
        pass: identical == checked,
        detail: if notes.is_empty() {
            format!("{identical}/{checked} configs produced byte-identical metrics CSVs")
        } else {
            format!("{identical}/{checked} configs produced byte-identical metrics CSVs; {}", notes.join("; "))
        },
    }
}

// ---------------------------------------------------------------------------
// 9. Heterogeneity monotonicity

fn criterion_9() -> Outcome {
    let mut means = Vec::new();
    for alpha in [0.1, 1.0, 10.0] {
        let tvs: Vec<f64> = (0..20)
            .map(|seed| {
                let mut cfg = task(seed, "fedmoe", 5, 10, FRESH);
                cfg.clients = 10;
                cfg.partition.alpha = Some(alpha);
                cfg.partition.per_client = 100;
                partition_report(&cfg).unwrap().mean_tv
            })
            .collect();
        means.push((alpha, mean(&tvs)));
    }
    let decreasing = means.windows(2).all(|w| w[1].1 < w[0].1);
    Outcome {
        pass: decreasing,
        detail: format!(
            "20-seed mean TV: {}",
            means
                .iter()
                .map(|(a, t)| format!("alpha={a}: {t:.4}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("aggregation oracles", criterion_1),
        ("gradient correctness", criterion_2),
        ("communication exactness", criterion_3),
        ("P=0 ablation identity", criterion_4),
        ("fedmoe beats fedavg under skew", criterion_5),
        ("staleness insensitivity", criterion_6),
        ("pretrained acceleration", criterion_7),
        ("determinism", criterion_8),
        ("heterogeneity monotonicity", criterion_9),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = format!("{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|x| *x == id || name.contains(x.as_str())) {
            continue;
        }
        let o = f();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {id} [{}] {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
