use ndarray::Array2;
use proptest::prelude::*;

use otda_core::minibatch::MinibatchSpec;
use otda_core::mixup::{mix_source_batch, random_permutation};
use otda_core::model::{load_checkpoint, predict_proba, save_checkpoint, MlpDims, MlpParams};
use otda_core::ot::{
    exact_ot, one_hot, plan_mass, sinkhorn, transport_cost, unbalanced_sinkhorn, CostMatrix, DiscreteMeasure,
    SolverConfig, TransportPlan,
};
use otda_core::rng;

fn weights(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.05f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Array2<f64>)> {
    (2usize..7, 2usize..7).prop_flat_map(|(n, m)| {
        (weights(n), weights(m), proptest::collection::vec(0.0f64..1.0, n * m))
            .prop_map(move |(a, b, c)| (a, b, Array2::from_shape_vec((n, m), c).unwrap()))
    })
}

fn measures(a: &[f64], b: &[f64]) -> (DiscreteMeasure, DiscreteMeasure) {
    (DiscreteMeasure::from_weights(a.to_vec()).unwrap(), DiscreteMeasure::from_weights(b.to_vec()).unwrap())
}

fn max_marginal_error(plan: &TransportPlan, a: &[f64], b: &[f64]) -> f64 {
    let r = plan.row_sums().iter().zip(a).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let c = plan.col_sums().iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    r.max(c)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_plan_is_feasible_and_beats_independent_coupling((a, b, c) in instance()) {
        let (ma, mb) = measures(&a, &b);
        let cost = CostMatrix::custom(c).unwrap();
        let plan = exact_ot(&ma, &mb, &cost).unwrap();
        prop_assert!(plan.coupling.iter().all(|&v| v >= 0.0));
        prop_assert!(max_marginal_error(&plan, &a, &b) < 1e-9);
        let mut independent = TransportPlan::zeros(a.len(), b.len());
        for i in 0..a.len() {
            for j in 0..b.len() {
                independent.coupling[[i, j]] = a[i] * b[j];
            }
        }
        prop_assert!(plan.objective_value <= transport_cost(&independent, &cost).unwrap() + 1e-12);
        prop_assert_eq!(plan, exact_ot(&ma, &mb, &cost).unwrap());
    }

    #[test]
    fn entropic_plans_dominate_exact_and_respect_marginals((a, b, c) in instance()) {
        let (ma, mb) = measures(&a, &b);
        let cost = CostMatrix::custom(c).unwrap();
        let exact = exact_ot(&ma, &mb, &cost).unwrap().objective_value;
        let cfg = SolverConfig::default().with_epsilon(0.05).with_max_iterations(20_000).with_tolerance(1e-10);
        let plan = sinkhorn(&ma, &mb, &cost, &cfg).unwrap();
        prop_assert!(max_marginal_error(&plan, &a, &b) < 1e-8);
        prop_assert!(plan.objective_value >= exact - 1e-9);
        let relaxed = unbalanced_sinkhorn(&ma, &mb, &cost, &cfg.with_tau(0.5)).unwrap();
        prop_assert!(relaxed.coupling.iter().all(|&v| v >= 0.0 && v.is_finite()));
        prop_assert!(plan_mass(&relaxed) < 1.0);
    }

    #[test]
    fn minibatch_draws_are_sorted_distinct_and_in_range(n in 4usize..30, p in 4usize..30, m in 1usize..4, seed in 0u64..50, draw in 0usize..20) {
        let src = DiscreteMeasure::uniform(Array2::zeros((n, 1)));
        let tgt = DiscreteMeasure::uniform(Array2::zeros((p, 1)));
        let spec = MinibatchSpec::new(m, 1, seed);
        let (s, t) = spec.draw_indices(&src, &tgt, draw).unwrap();
        prop_assert_eq!(s.len(), m);
        prop_assert_eq!(t.len(), m);
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]) && t.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.iter().all(|&i| i < n) && t.iter().all(|&j| j < p));
        prop_assert_eq!((s, t), spec.draw_indices(&src, &tgt, draw).unwrap());
    }

    #[test]
    fn mixed_labels_stay_on_the_simplex(lambda in 0.0f64..=1.0, seed in 0u64..100) {
        let labels: Vec<usize> = (0..8).map(|i| (i * 7 + seed as usize) % 3).collect();
        let y = one_hot(&labels, 3);
        let x = Array2::from_shape_fn((8, 2), |(i, k)| (i + k) as f64);
        let perm = random_permutation(8, &mut rng::stream(seed, 0));
        let (_, ym) = mix_source_batch(x.view(), y.view(), lambda, &perm).unwrap();
        for row in ym.rows() {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn predictions_are_probabilities_and_checkpoints_round_trip(seed in 0u64..100, hidden in 1usize..6, classes in 2usize..5) {
        let dims = MlpDims { input: 3, hidden: vec![hidden, hidden + 1], embedding: 2, classes };
        let p = MlpParams::init(dims, seed);
        let x = Array2::from_shape_fn((5, 3), |(i, k)| (i as f64 - 2.0) * (k as f64 + 0.5) * 10.0);
        let prob = predict_proba(&p, x.view()).unwrap();
        for row in prob.rows() {
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        let mut buf = Vec::new();
        save_checkpoint(&p, &mut buf).unwrap();
        prop_assert_eq!(load_checkpoint(buf.as_slice()).unwrap(), p);
    }
}
