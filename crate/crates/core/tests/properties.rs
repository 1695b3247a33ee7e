//! Property tests for the numerical building blocks and the aggregation rule.

use fedmoe::agg::{aggregate_experts, aggregation_matrix, request_sets, similarity, stack_proxies};
use fedmoe::nn::{softmax, Matrix};
use proptest::prelude::*;

fn vector(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, len)
}

/// Gating matrices for `clients` clients with `k` experts each over `n` dims.
fn gatings(clients: usize, k: usize, n: usize) -> impl Strategy<Value = Vec<Matrix>> {
    prop::collection::vec(vector(n * k), clients)
        .prop_map(move |vs| vs.into_iter().map(|v| Matrix::from_vec(n, k, v).unwrap()).collect())
}

fn setting() -> impl Strategy<Value = (Vec<Matrix>, usize, f64)> {
    (1usize..5, 1usize..4, 1usize..5)
        .prop_flat_map(|(clients, k, n)| {
            let m = clients * k;
            (gatings(clients, k, n), 0..m, 0.05f64..10.0)
        })
}

fn matrix_of(gs: &[Matrix], p: usize, tau: f64) -> fedmoe::agg::AggregationMatrix {
    let refs: Vec<&Matrix> = gs.iter().collect();
    aggregation_matrix(&stack_proxies(&refs).unwrap(), p, tau, 1).unwrap()
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-700.0f64..700.0, 1..20)) {
        let s = softmax(&v);
        prop_assert!(s.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant(v in vector(6), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        for (a, b) in softmax(&v).iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_rows_are_stochastic_and_bounded((gs, p, tau) in setting()) {
        let a = matrix_of(&gs, p, tau);
        let m = a.len();
        for (i, row) in a.rows.iter().enumerate() {
            prop_assert!(row.support.contains(&i));
            prop_assert_eq!(row.support.len(), (p + 1).min(m));
            prop_assert!(row.weights.iter().all(|&w| w > 0.0));
            prop_assert!((row.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_stays_in_the_convex_hull((gs, p, tau) in setting(), seed in vector(3)) {
        let a = matrix_of(&gs, p, tau);
        let experts: Vec<Vec<f64>> = (0..a.len())
            .map(|j| seed.iter().map(|s| s * (j as f64 + 1.0)).collect())
            .collect();
        let mixed = aggregate_experts(&experts, &a).unwrap();
        for out in &mixed {
            for c in 0..seed.len() {
                let lo = experts.iter().map(|e| e[c]).fold(f64::INFINITY, f64::min);
                let hi = experts.iter().map(|e| e[c]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out[c] >= lo - 1e-9 && out[c] <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn self_weight_grows_as_temperature_falls((gs, p, tau) in setting()) {
        // self-similarity is the row maximum, so sharpening never lowers it
        let hot = matrix_of(&gs, p, tau * 2.0);
        let cold = matrix_of(&gs, p, tau);
        for i in 0..hot.len() {
            prop_assert!(cold.rows[i].weight_of(i) >= hot.rows[i].weight_of(i) - 1e-12);
        }
    }

    #[test]
    fn client_relabelling_permutes_the_matrix((gs, p, tau) in setting()) {
        let clients = gs.len();
        let k = gs[0].cols();
        let mut rev = gs.clone();
        rev.reverse();
        let a = matrix_of(&gs, p, tau).to_dense();
        let b = matrix_of(&rev, p, tau).to_dense();
        let perm = |j: usize| (clients - 1 - j / k) * k + j % k;
        let m = clients * k;
        // ties are broken by index, so only compare when the top-P choice is unambiguous
        let refs: Vec<&Matrix> = gs.iter().collect();
        let r = similarity(&stack_proxies(&refs).unwrap());
        let unambiguous = (0..m).all(|i| {
            let mut others: Vec<f64> = (0..m).filter(|&j| j != i).map(|j| r.get(i, j)).collect();
            others.sort_by(|x, y| y.partial_cmp(x).unwrap());
            p == 0 || p >= others.len() || (others[p - 1] - others[p]).abs() > 1e-9
        });
        prop_assume!(unambiguous);
        for i in 0..m {
            for j in 0..m {
                prop_assert!((a.get(i, j) - b.get(perm(i), perm(j))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn request_sets_are_sorted_and_sized((gs, p, _tau) in setting()) {
        let refs: Vec<&Matrix> = gs.iter().collect();
        let r = similarity(&stack_proxies(&refs).unwrap());
        for (i, set) in request_sets(&r, p).iter().enumerate() {
            prop_assert!(set.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(set.contains(&i));
            prop_assert_eq!(set.len(), (p + 1).min(r.rows()));
        }
    }

    #[test]
    fn matrix_construction_is_deterministic((gs, p, tau) in setting()) {
        prop_assert_eq!(matrix_of(&gs, p, tau), matrix_of(&gs, p, tau));
    }
}
