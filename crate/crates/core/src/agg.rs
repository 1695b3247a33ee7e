//! Domain-aware expert aggregation.
//!
//! Gating proxies from every client are stacked into one bank. Their cosine
//! similarities decide, for each expert, which `P` peers it pulls from and
//! with what weight. The resulting matrix is row-stochastic with at most
//! `P + 1` non-zeros per row.

use std::io::{BufRead, Write};

use log::warn;

use crate::error::{Error, Result};
use crate::moe::top_k_indices;
use crate::nn::{dot, Matrix};

/// A global expert identifier: owning client and local expert index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExpertId {
    pub client: usize,
    pub expert: usize,
}

/// Proxies stacked client-major, expert-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyBank {
    proxies: Vec<Vec<f64>>,
    ids: Vec<ExpertId>,
    /// Global index of each client's first expert.
    offsets: Vec<usize>,
}

impl ProxyBank {
    pub fn len(&self) -> usize {
        self.proxies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proxies.is_empty()
    }

    pub fn proxy(&self, global: usize) -> &[f64] {
        &self.proxies[global]
    }

    pub fn id(&self, global: usize) -> ExpertId {
        self.ids[global]
    }

    pub fn global_index(&self, id: ExpertId) -> Option<usize> {
        let start = *self.offsets.get(id.client)?;
        let end = self.offsets.get(id.client + 1).copied().unwrap_or(self.proxies.len());
        (start + id.expert < end).then_some(start + id.expert)
    }

    /// Experts per client, in client order.
    pub fn experts_per_client(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.offsets.windows(2).map(|w| w[1] - w[0]).collect();
        if let Some(&last) = self.offsets.last() {
            out.push(self.proxies.len() - last);
        }
        out
    }
}

/// Layout of global expert indices for clients with `experts_per_client`
/// experts each, without any proxy data.
pub fn expert_layout(experts_per_client: &[usize]) -> Vec<ExpertId> {
    experts_per_client
        .iter()
        .enumerate()
        .flat_map(|(client, &k)| (0..k).map(move |expert| ExpertId { client, expert }))
        .collect()
}

/// Columns of every client's gating matrix, client-major.
pub fn stack_proxies(gatings: &[&Matrix]) -> Result<ProxyBank> {
    let n = gatings.first().map_or(0, |g| g.rows());
    let mut proxies = Vec::new();
    let mut ids = Vec::new();
    let mut offsets = Vec::with_capacity(gatings.len());
    for (client, g) in gatings.iter().enumerate() {
        if g.rows() != n {
            return Err(Error::dim(format!("gating rows of client {client}"), n, g.rows()));
        }
        offsets.push(proxies.len());
        for expert in 0..g.cols() {
            proxies.push(g.column(expert));
            ids.push(ExpertId { client, expert });
        }
    }
    Ok(ProxyBank { proxies, ids, offsets })
}

/// Cosine similarities between all proxies, `M × M`.
///
/// A zero-norm proxy is similar only to itself: its row and column are 0
/// except for the unit diagonal.
pub fn similarity(bank: &ProxyBank) -> Matrix {
    let m = bank.len();
    let norms: Vec<f64> = bank.proxies.iter().map(|p| dot(p, p).sqrt()).collect();
    for (i, &nrm) in norms.iter().enumerate() {
        if nrm == 0.0 {
            let id = bank.id(i);
            warn!(
                "proxy {i} (client {}, expert {}) has zero norm; treating it as self-similar only",
                id.client, id.expert
            );
        }
    }
    let mut r = Matrix::zeros(m, m);
    for i in 0..m {
        r.set(i, i, 1.0);
        for j in 0..i {
            let v = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                (dot(&bank.proxies[i], &bank.proxies[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            r.set(i, j, v);
            r.set(j, i, v);
        }
    }
    r
}

/// For each row `i`: `{i}` plus the `P` other indices with the largest
/// similarity, ties to the smaller index. Returned sets are sorted ascending.
pub fn request_sets(r: &Matrix, p: usize) -> Vec<Vec<usize>> {
    let m = r.rows();
    (0..m)
        .map(|i| {
            let mut row = r.row(i).to_vec();
            row[i] = f64::NEG_INFINITY;
            let mut set = top_k_indices(&row, p.min(m - 1));
            set.push(i);
            set.sort_unstable();
            set
        })
        .collect()
}

/// One row of the aggregation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationRow {
    /// Sorted ascending; always contains the row's own index.
    pub support: Vec<usize>,
    pub weights: Vec<f64>,
}

impl AggregationRow {
    pub fn identity(i: usize) -> Self {
        Self {
            support: vec![i],
            weights: vec![1.0],
        }
    }

    pub fn weight_of(&self, j: usize) -> f64 {
        self.support
            .binary_search(&j)
            .map_or(0.0, |k| self.weights[k])
    }
}

/// Sparse row-stochastic matrix with the round it was computed in. Round 0
/// denotes the bootstrap identity.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationMatrix {
    pub rows: Vec<AggregationRow>,
    pub computed_at_round: usize,
}

impl AggregationMatrix {
    pub fn identity(m: usize) -> Self {
        Self {
            rows: (0..m).map(AggregationRow::identity).collect(),
            computed_at_round: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.rows
            .iter()
            .enumerate()
            .all(|(i, r)| r.support == [i] && r.weights == [1.0])
    }

    pub fn to_dense(&self) -> Matrix {
        let m = self.rows.len();
        let mut d = Matrix::zeros(m, m);
        for (i, row) in self.rows.iter().enumerate() {
            for (&j, &w) in row.support.iter().zip(&row.weights) {
                d.set(i, j, w);
            }
        }
        d
    }

    /// CSV with header `computed_at_round,i,j,weight`, one line per non-zero.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "computed_at_round,i,j,weight")?;
        for (i, row) in self.rows.iter().enumerate() {
            for (&j, &w) in row.support.iter().zip(&row.weights) {
                writeln!(out, "{},{i},{j},{w:?}", self.computed_at_round)?;
            }
        }
        Ok(())
    }

    /// Reads the layout produced by [`write_csv`](Self::write_csv) for a
    /// matrix with `m` rows.
    pub fn read_csv<R: BufRead>(input: R, m: usize) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::InvalidConfig(format!("aggregation CSV line {line}: {msg}"));
        let mut rows: Vec<AggregationRow> = (0..m)
            .map(|_| AggregationRow {
                support: Vec::new(),
                weights: Vec::new(),
            })
            .collect();
        let mut round = None;
        for (n, line) in input.lines().enumerate() {
            let line = line.map_err(|e| bad(n + 1, &e.to_string()))?;
            if n == 0 {
                if line.trim() != "computed_at_round,i,j,weight" {
                    return Err(bad(1, "unexpected header"));
                }
                continue;
            }
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 4 {
                return Err(bad(n + 1, "expected 4 fields"));
            }
            let t: usize = f[0].parse().map_err(|_| bad(n + 1, "bad round"))?;
            let i: usize = f[1].parse().map_err(|_| bad(n + 1, "bad row index"))?;
            let j: usize = f[2].parse().map_err(|_| bad(n + 1, "bad column index"))?;
            let w: f64 = f[3].parse().map_err(|_| bad(n + 1, "bad weight"))?;
            if *round.get_or_insert(t) != t {
                return Err(bad(n + 1, "inconsistent computed_at_round"));
            }
            if i >= m || j >= m {
                return Err(bad(n + 1, "index out of range"));
            }
            rows[i].support.push(j);
            rows[i].weights.push(w);
        }
        Ok(Self {
            rows,
            computed_at_round: round.unwrap_or(0),
        })
    }
}

/// Temperature softmax of `r[i][j]` over each support set.
pub fn weights(r: &Matrix, supports: &[Vec<usize>], tau: f64) -> Result<Vec<AggregationRow>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidConfig(format!("temperature tau must be > 0, got {tau}")));
    }
    Ok(supports
        .iter()
        .enumerate()
        .map(|(i, support)| {
            let logits: Vec<f64> = support.iter().map(|&j| r.get(i, j) / tau).collect();
            AggregationRow {
                support: support.clone(),
                weights: crate::nn::softmax(&logits),
            }
        })
        .collect())
}

/// Full pipeline: proxies -> similarity -> request sets -> weights.
pub fn aggregation_matrix(bank: &ProxyBank, p: usize, tau: f64, round: usize) -> Result<AggregationMatrix> {
    let r = similarity(bank);
    let supports = request_sets(&r, p);
    Ok(AggregationMatrix {
        rows: weights(&r, &supports, tau)?,
        computed_at_round: round,
    })
}

/// `Σ_{j ∈ S} a_j · experts[j]`, reading only the given snapshot.
pub fn aggregate_row(row: &AggregationRow, experts: &[Vec<f64>]) -> Result<Vec<f64>> {
    let len = experts.first().map_or(0, Vec::len);
    let mut out = vec![0.0; len];
    for (&j, &w) in row.support.iter().zip(&row.weights) {
        let e = experts
            .get(j)
            .ok_or_else(|| Error::dim("aggregation support index", experts.len(), j + 1))?;
        if e.len() != len {
            return Err(Error::dim(format!("expert {j} parameter count"), len, e.len()));
        }
        for (o, v) in out.iter_mut().zip(e) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Simultaneous update of every expert from the pre-aggregation inputs.
pub fn aggregate_experts(experts: &[Vec<f64>], a: &AggregationMatrix) -> Result<Vec<Vec<f64>>> {
    if a.len() != experts.len() {
        return Err(Error::dim("aggregation rows vs experts", experts.len(), a.len()));
    }
    a.rows.iter().map(|row| aggregate_row(row, experts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(vs: &[Vec<f64>]) -> ProxyBank {
        // one client owning every proxy
        let cols = vs.len();
        let n = vs[0].len();
        let mut g = Matrix::zeros(n, cols);
        for (c, v) in vs.iter().enumerate() {
            for (r, &x) in v.iter().enumerate() {
                g.set(r, c, x);
            }
        }
        stack_proxies(&[&g]).unwrap()
    }

    #[test]
    fn stacking_order_and_bijection() {
        let g1 = Matrix::zeros(3, 1);
        let g2 = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let b = stack_proxies(&[&g1, &g2]).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b.id(0), ExpertId { client: 0, expert: 0 });
        assert_eq!(b.id(1), ExpertId { client: 1, expert: 0 });
        assert_eq!(b.id(2), ExpertId { client: 1, expert: 1 });
        assert_eq!(b.proxy(2), &[2.0, 4.0, 6.0]);
        for i in 0..3 {
            assert_eq!(b.global_index(b.id(i)), Some(i));
        }
        assert_eq!(b.global_index(ExpertId { client: 0, expert: 1 }), None);
        assert_eq!(b.experts_per_client(), vec![1, 2]);
        assert_eq!(expert_layout(&[1, 2]), (0..3).map(|i| b.id(i)).collect::<Vec<_>>());

        let single = stack_proxies(&[&g2]).unwrap();
        assert_eq!(single.len(), 2);
        assert_eq!(single.global_index(ExpertId { client: 0, expert: 1 }), Some(1));
    }

    #[test]
    fn stacking_rejects_inconsistent_rows() {
        let a = Matrix::zeros(3, 2);
        let b = Matrix::zeros(2, 2);
        assert!(stack_proxies(&[&a, &b]).is_err());
    }

    #[test]
    fn similarity_examples() {
        let r = similarity(&bank(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        assert_eq!(r.get(0, 1), 0.0);
        let r = similarity(&bank(&[vec![0.3, -0.7], vec![0.6, -1.4]]));
        assert!((r.get(0, 1) - 1.0).abs() < 1e-15);
        let r = similarity(&bank(&[vec![1.0, 2.0], vec![2.0, 1.0]]));
        assert!((r.get(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(r.get(0, 0), 1.0);
    }

    #[test]
    fn zero_proxy_is_self_similar_only() {
        let r = similarity(&bank(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]]));
        assert_eq!(r.get(0, 0), 1.0);
        assert_eq!(r.get(0, 1), 0.0);
        assert_eq!(r.get(2, 0), 0.0);
        let s = request_sets(&r, 1);
        assert_eq!(s[0], vec![0, 1]);
        let a = weights(&r, &s, 1.0).unwrap();
        assert!(a[0].weight_of(0) > a[0].weight_of(1));
    }

    #[test]
    fn request_set_examples() {
        let r = Matrix::from_rows(&[
            vec![1.0, 0.9, 0.2, 0.5],
            vec![0.9, 1.0, 0.1, 0.3],
            vec![0.2, 0.1, 1.0, 0.4],
            vec![0.5, 0.3, 0.4, 1.0],
        ])
        .unwrap();
        assert_eq!(request_sets(&r, 1)[0], vec![0, 1]);
        assert_eq!(request_sets(&r, 2)[2], vec![0, 2, 3]);
        for (i, s) in request_sets(&r, 0).into_iter().enumerate() {
            assert_eq!(s, vec![i]);
        }
        assert_eq!(request_sets(&r, 10)[3], vec![0, 1, 2, 3]);

        let tie = Matrix::from_rows(&[vec![1.0, 0.5, 0.5], vec![0.5, 1.0, 0.5], vec![0.5, 0.5, 1.0]]).unwrap();
        assert_eq!(request_sets(&tie, 1)[0], vec![0, 1]);
        assert_eq!(request_sets(&tie, 1)[2], vec![0, 2]);
    }

    #[test]
    fn request_set_keeps_self_even_against_duplicates() {
        // proxy 0 and 1 identical: r_01 = 1 = r_11
        let r = similarity(&bank(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]));
        assert_eq!(request_sets(&r, 1)[1], vec![0, 1]);
        assert_eq!(request_sets(&r, 0)[1], vec![1]);
    }

    #[test]
    fn weight_examples() {
        let r = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let a = weights(&r, &[vec![0], vec![0, 1]], 1.0).unwrap();
        assert_eq!(a[0].weights, vec![1.0]);
        assert!((a[1].weight_of(1) - 0.622_459_331_201_854_6).abs() < 1e-12);
        assert!((a[1].weight_of(0) - 0.377_540_668_798_145_4).abs() < 1e-12);

        let flat = Matrix::from_rows(&vec![vec![1.0, 1.0, 1.0]; 3]).unwrap();
        let a = weights(&flat, &[vec![0, 1, 2]], 0.3).unwrap();
        assert!(a[0].weights.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));

        assert!(weights(&r, &[vec![0]], 0.0).is_err());
        assert!(weights(&r, &[vec![0]], -1.0).is_err());
    }

    #[test]
    fn aggregation_examples() {
        let experts = vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![4.0, 4.0]];
        let id = AggregationMatrix::identity(3);
        assert_eq!(aggregate_experts(&experts, &id).unwrap(), experts);

        let same = vec![vec![0.7, -0.2]; 2];
        let a = AggregationMatrix {
            rows: vec![
                AggregationRow {
                    support: vec![0, 1],
                    weights: vec![0.3, 0.7],
                },
                AggregationRow::identity(1),
            ],
            computed_at_round: 1,
        };
        let out = aggregate_experts(&same, &a).unwrap();
        for (o, s) in out[0].iter().zip(&same[0]) {
            assert!((o - s).abs() < 1e-15);
        }

        let bad = vec![vec![1.0], vec![1.0, 2.0]];
        assert!(aggregate_experts(&bad, &a).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let b = bank(&[vec![1.0, 0.1], vec![0.5, 0.5], vec![-1.0, 0.3]]);
        let a = aggregation_matrix(&b, 1, 1.0, 6).unwrap();
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let back = AggregationMatrix::read_csv(&buf[..], 3).unwrap();
        assert_eq!(back, a);
    }
}
