//! Label-skew partitioners.
//!
//! Each client receives a training shard of exactly `per_client` samples and
//! a test shard of `max(1, per_client / 5)` samples whose label counts are the
//! training counts rescaled by largest-remainder rounding. Test samples are
//! drawn before training samples, and no dataset index is used twice.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::rng::SeedTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Homogeneous,
    PathologicalBalanced,
    PathologicalUnbalanced,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub scheme: Scheme,
    /// Dirichlet concentration; required for `dirichlet`, ignored otherwise.
    #[serde(default)]
    pub alpha: Option<f64>,
    pub per_client: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.per_client == 0 {
            return Err(Error::Partition("per_client must be >= 1".into()));
        }
        match self.scheme {
            Scheme::Dirichlet => match self.alpha {
                Some(a) if a > 0.0 && a.is_finite() => {}
                Some(a) => return Err(Error::Partition(format!("dirichlet alpha must be > 0, got {a}"))),
                None => return Err(Error::Partition("dirichlet scheme requires alpha".into())),
            },
            Scheme::PathologicalBalanced | Scheme::PathologicalUnbalanced if self.per_client < 2 => {
                return Err(Error::Partition("pathological schemes need per_client >= 2".into()));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn test_per_client(&self) -> usize {
        (self.per_client / 5).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Dataset indices of `train` and `test`, in order.
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl ClientShard {
    pub fn train_counts(&self, classes: usize) -> Vec<usize> {
        label_counts(&self.train, classes)
    }
}

pub fn label_counts(samples: &[Sample], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for s in samples {
        counts[s.label] += 1;
    }
    counts
}

/// Integer counts summing to `total`, proportional to `weights`. Leftover
/// units go to the largest fractional parts; equal remainders are served
/// starting from index `tie_offset` (cyclically) so repeated calls spread them.
pub fn largest_remainder(weights: &[f64], total: usize, tie_offset: usize) -> Vec<usize> {
    let n = weights.len();
    let sum: f64 = weights.iter().sum();
    if n == 0 {
        return Vec::new();
    }
    if !(sum > 0.0) {
        let mut out = vec![0; n];
        out[tie_offset % n] = total;
        return out;
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    let rank = |i: usize| (i + n - tie_offset % n) % n;
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(rank(a).cmp(&rank(b)))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn dirichlet_proportions<R: Rng + ?Sized>(alpha: f64, classes: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated > 0");
    let draws: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.into_iter().map(|g| g / sum).collect()
    } else {
        // every gamma draw underflowed: the limit is a point mass on one class
        let mut p = vec![0.0; classes];
        p[rng.random_range(0..classes)] = 1.0;
        p
    }
}

/// Per-client training label counts for `spec`.
fn train_label_counts<R: Rng + ?Sized>(
    spec: &PartitionSpec,
    clients: usize,
    global: &[usize],
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let c = global.len();
    let m = spec.per_client;
    match spec.scheme {
        Scheme::Homogeneous => {
            let w: Vec<f64> = global.iter().map(|&g| g as f64).collect();
            (0..clients).map(|i| largest_remainder(&w, m, i)).collect()
        }
        Scheme::PathologicalBalanced | Scheme::PathologicalUnbalanced => {
            let mut perm: Vec<usize> = (0..c).collect();
            perm.shuffle(rng);
            (0..clients)
                .map(|i| {
                    let a = perm[(2 * i) % c];
                    let b = perm[(2 * i + 1) % c];
                    let first = if spec.scheme == Scheme::PathologicalBalanced {
                        m.div_ceil(2)
                    } else {
                        let ratio: f64 = rng.random_range(0.1..=0.9);
                        ((ratio * m as f64).round() as usize).clamp(1, m - 1)
                    };
                    let mut counts = vec![0; c];
                    counts[a] = first;
                    counts[b] = m - first;
                    counts
                })
                .collect()
        }
        Scheme::Dirichlet => {
            let alpha = spec.alpha.expect("validated");
            (0..clients)
                .map(|i| largest_remainder(&dirichlet_proportions(alpha, c, rng), m, i))
                .collect()
        }
    }
}

/// Splits `ds` into `clients` shards according to `spec`.
pub fn partition(ds: &Dataset, clients: usize, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    spec.validate()?;
    if clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    let classes = ds.classes();
    if matches!(spec.scheme, Scheme::PathologicalBalanced | Scheme::PathologicalUnbalanced) && classes < 2 {
        return Err(Error::Partition("pathological schemes need at least 2 classes".into()));
    }
    let tree = SeedTree::new(spec.seed);
    let mut rng = tree.child(0).rng();

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in ds.samples().iter().enumerate() {
        pools[s.label].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let global: Vec<usize> = pools.iter().map(Vec::len).collect();

    let train_counts = train_label_counts(spec, clients, &global, &mut rng);
    let test_size = spec.test_per_client();
    let test_counts: Vec<Vec<usize>> = train_counts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let w: Vec<f64> = t.iter().map(|&v| v as f64).collect();
            largest_remainder(&w, test_size, i)
        })
        .collect();

    for c in 0..classes {
        let need: usize = (0..clients).map(|i| train_counts[i][c] + test_counts[i][c]).sum();
        if need > global[c] {
            return Err(Error::Partition(format!(
                "class {c} has {} samples but the {:?} split needs {need} ({clients} clients x {} train + {test_size} test)",
                global[c], spec.scheme, spec.per_client
            )));
        }
    }

    let mut cursor = vec![0usize; classes];
    let mut take = |c: usize, k: usize| -> Vec<usize> {
        let out = pools[c][cursor[c]..cursor[c] + k].to_vec();
        cursor[c] += k;
        out
    };
    let mut shards = Vec::with_capacity(clients);
    for i in 0..clients {
        let mut test_indices = Vec::with_capacity(test_size);
        let mut train_indices = Vec::with_capacity(spec.per_client);
        for c in 0..classes {
            test_indices.extend(take(c, test_counts[i][c]));
            train_indices.extend(take(c, train_counts[i][c]));
        }
        let pick = |idx: &[usize]| idx.iter().map(|&k| ds.samples()[k].clone()).collect();
        shards.push(ClientShard {
            client_id: i,
            train: pick(&train_indices),
            test: pick(&test_indices),
            train_indices,
            test_indices,
        });
    }
    Ok(shards)
}

fn normalise(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
}

/// Mean total-variation distance between the training label distributions
/// of every pair of shards. Zero when there is a single shard.
pub fn mean_pairwise_tv(shards: &[ClientShard], classes: usize) -> f64 {
    let dists: Vec<Vec<f64>> = shards.iter().map(|s| normalise(&s.train_counts(classes))).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..dists.len() {
        for j in i + 1..dists.len() {
            total += 0.5 * dists[i].iter().zip(&dists[j]).map(|(a, b)| (a - b).abs()).sum::<f64>();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// `client_id,class_id,count` rows for every client and class.
pub fn write_partition_csv<W: Write>(out: &mut W, shards: &[ClientShard], classes: usize) -> std::io::Result<()> {
    writeln!(out, "client_id,class_id,count")?;
    for s in shards {
        for (c, n) in s.train_counts(classes).into_iter().enumerate() {
            writeln!(out, "{},{c},{n}", s.client_id)?;
        }
    }
    Ok(())
}
