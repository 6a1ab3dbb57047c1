use ndarray::{Array1, Array2};
use proptest::prelude::*;

use mgformer::attention::{dense_oracle, masked_linear_attention, AttentionInputs, MaskMode};
use mgformer::evaluation::{batch_recall_ndcg, recall_ndcg_at_k};
use mgformer::graph_data::{split_edges, InteractionGraph, Split, SplitRatios};
use mgformer::kernel_features::{build_simrf_map, FeatureMap, FeatureMapKind, Shift};
use mgformer::training::degree_bucket;

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-1.0..1.0f64, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap() * scale)
}

fn attention_case(
) -> impl Strategy<Value = (Array2<f64>, Array2<f64>, Array2<f64>, Array1<f64>, u64)> {
    (2usize..40, prop::sample::select(vec![2usize, 4, 8])).prop_flat_map(|(n, m)| {
        (
            matrix(n, m, 1.0),
            matrix(m, m, 0.2).prop_map(move |w| w + Array2::<f64>::eye(m)),
            matrix(m, m, 0.2).prop_map(move |w| w + Array2::<f64>::eye(m)),
            prop::collection::vec(0.01..0.99f64, n).prop_map(Array1::from),
            any::<u64>(),
        )
    })
}

fn max_rel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-300))
        .fold(0.0, f64::max)
}

fn edge_list() -> impl Strategy<Value = (usize, usize, Vec<(usize, usize)>)> {
    (1usize..15, 1usize..15)
        .prop_flat_map(|(m, n)| (Just(m), Just(n), prop::collection::vec((0..m, 0..n), 0..80)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_attention_matches_dense((x, wq, wk, z, seed) in attention_case()) {
        let m = x.ncols();
        let map = build_simrf_map(m, seed).unwrap();
        let inputs = AttentionInputs {
            x: x.view(), w_q: wq.view(), w_k: wk.view(), degree_z: z.view(),
            mask_mode: MaskMode::SineDegree,
        };
        let fast = masked_linear_attention(&inputs, &map).unwrap().h;
        let slow = dense_oracle(&inputs, &map, false).unwrap().h;
        prop_assert!(max_rel(&fast, &slow) <= 1e-9);
    }

    #[test]
    fn attention_is_permutation_equivariant((x, wq, wk, z, seed) in attention_case(), rot in 0usize..40) {
        let n = x.nrows();
        let m = x.ncols();
        let map = build_simrf_map(m, seed).unwrap();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let xp = x.select(ndarray::Axis(0), &perm);
        let zp: Array1<f64> = perm.iter().map(|&i| z[i]).collect();
        let run = |x: &Array2<f64>, z: &Array1<f64>| {
            let inputs = AttentionInputs {
                x: x.view(), w_q: wq.view(), w_k: wk.view(), degree_z: z.view(),
                mask_mode: MaskMode::SineDegree,
            };
            masked_linear_attention(&inputs, &map).unwrap().h
        };
        let h = run(&x, &z);
        let hp = run(&xp, &zp);
        prop_assert!(max_rel(&hp, &h.select(ndarray::Axis(0), &perm)) <= 1e-9);
    }

    #[test]
    fn constant_centrality_matches_unmasked((x, wq, wk, _z, seed) in attention_case(), c in 0.01..0.99f64) {
        let map = build_simrf_map(x.ncols(), seed).unwrap();
        let z = Array1::from_elem(x.nrows(), c);
        let run = |mode| {
            let inputs = AttentionInputs {
                x: x.view(), w_q: wq.view(), w_k: wk.view(), degree_z: z.view(), mask_mode: mode,
            };
            masked_linear_attention(&inputs, &map).unwrap().h
        };
        let sine = run(MaskMode::SineDegree);
        let ones = run(MaskMode::AllOnes);
        for (a, b) in sine.rows().into_iter().zip(ones.rows()) {
            let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let err = a.iter().zip(b).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
            prop_assert!(err <= 1e-12 * scale);
        }
    }

    #[test]
    fn outputs_stay_in_value_hull((x, wq, wk, z, seed) in attention_case()) {
        let map = build_simrf_map(x.ncols(), seed).unwrap();
        let inputs = AttentionInputs {
            x: x.view(), w_q: wq.view(), w_k: wk.view(), degree_z: z.view(),
            mask_mode: MaskMode::SineDegree,
        };
        let h = masked_linear_attention(&inputs, &map).unwrap().h;
        for c in 0..x.ncols() {
            let col = x.column(c);
            let lo = col.fold(f64::INFINITY, |a, &b| a.min(b));
            let hi = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            for &v in h.column(c) {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn positive_maps_are_nonnegative(a in matrix(6, 4, 3.0), kind in prop::sample::select(vec![
        FeatureMapKind::SimRf, FeatureMapKind::PositiveRf, FeatureMapKind::Elu1,
        FeatureMapKind::Relu, FeatureMapKind::Focused,
    ]), seed in any::<u64>()) {
        let map = FeatureMap::new(kind, 4, seed, 3.0).unwrap();
        for shift in [Shift::None, Shift::PerRow, Shift::Global] {
            let phi = map.apply_rows(a.view(), shift);
            prop_assert!(phi.iter().all(|v| *v >= 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn degrees_are_conserved((m, n, edges) in edge_list()) {
        let g = InteractionGraph::from_edges(m, n, edges).unwrap();
        let e = g.edges.len() as u64;
        prop_assert_eq!(g.user_degrees.iter().sum::<u64>(), e);
        prop_assert_eq!(g.item_degrees.iter().sum::<u64>(), e);
    }

    #[test]
    fn split_is_deterministic_and_keeps_training_edges((m, n, edges) in edge_list(), seed in any::<u64>()) {
        let g = InteractionGraph::from_edges(m, n, edges).unwrap();
        let a = split_edges(g.clone(), SplitRatios::default(), seed).unwrap();
        let b = split_edges(g, SplitRatios::default(), seed).unwrap();
        prop_assert_eq!(&a.split, &b.split);
        let train = a.user_items(Split::Train);
        for u in 0..a.num_users {
            if a.user_degrees[u] >= 3 {
                prop_assert!(!train[u].is_empty());
            }
        }
        prop_assert_eq!(a.split_sizes().iter().sum::<usize>(), a.edges.len());
    }

    #[test]
    fn buckets_are_monotone_and_capped(deg in any::<u64>(), extra in 0u64..1000, buckets in 1usize..40) {
        let b = degree_bucket(deg, buckets);
        prop_assert!(b < buckets);
        prop_assert!(degree_bucket(deg.saturating_add(extra), buckets) >= b);
    }

    #[test]
    fn metrics_bounded_and_recall_monotone(
        ranked in Just((0..30usize).collect::<Vec<_>>()).prop_shuffle(),
        relevant in prop::collection::vec(0usize..30, 1..10),
    ) {
        let mut prev = 0.0;
        for k in 1..=30 {
            let (r, g) = recall_ndcg_at_k(&ranked, &relevant, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&r) && (0.0..=1.0 + 1e-12).contains(&g));
            prop_assert!(r >= prev);
            prev = r;
            let batched = batch_recall_ndcg(std::slice::from_ref(&ranked), std::slice::from_ref(&relevant), k, 30).unwrap();
            prop_assert_eq!(batched[0], (r, g));
        }
    }
}
