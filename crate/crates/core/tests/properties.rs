use crow::assignment::solve_assignment;
use crow::evaluation::{h_score, unseen_accuracy};
use crow::io::{decode_cef, encode_cef};
use crow::kmeans::kmeans_fit_matrix;
use crow::matching::{column_softmax, split_indices, threshold_match};
use crow::{ClassCatalog, EmbeddingSet, PredictionSet};
use ndarray::{Array2, Axis};
use proptest::prelude::*;

fn brute_force_min(cost: &Array2<f64>) -> f64 {
    fn go(cost: &Array2<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.nrows() {
            *best = best.min(acc);
            return;
        }
        for c in 0..cost.ncols() {
            if !used[c] {
                used[c] = true;
                go(cost, row + 1, used, acc + cost[[row, c]], best);
                used[c] = false;
            }
        }
    }
    // Rows must not outnumber columns for the recursion; transpose if needed.
    let cost = if cost.nrows() > cost.ncols() { cost.t().to_owned() } else { cost.clone() };
    let mut best = f64::INFINITY;
    go(&cost, 0, &mut vec![false; cost.ncols()], 0.0, &mut best);
    best
}

fn cost_matrix() -> impl Strategy<Value = Array2<f64>> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(r, c)| {
        prop::collection::vec(-50.0f64..50.0, r * c).prop_map(move |v| Array2::from_shape_vec((r, c), v).unwrap())
    })
}

fn gamma_matrix() -> impl Strategy<Value = Array2<u64>> {
    (1usize..=8, 1usize..=6).prop_flat_map(|(k, s)| {
        prop::collection::vec(0u64..40, k * s).prop_map(move |v| Array2::from_shape_vec((k, s), v).unwrap())
    })
}

proptest! {
    #[test]
    fn hungarian_matches_exhaustive_search(cost in cost_matrix()) {
        let result = solve_assignment(cost.view()).unwrap();
        let oracle = brute_force_min(&cost);
        prop_assert!((result.total_cost - oracle).abs() < 1e-9);
        prop_assert_eq!(result.mapping.len(), cost.nrows().min(cost.ncols()));
        let recomputed: f64 = result.mapping.iter().map(|&(r, c)| cost[[r, c]]).sum();
        prop_assert!((recomputed - result.total_cost).abs() < 1e-9);
    }

    #[test]
    fn constant_shift_moves_total_by_min_side(cost in cost_matrix(), shift in -10.0f64..10.0) {
        let base = solve_assignment(cost.view()).unwrap();
        let shifted = solve_assignment((&cost + shift).view()).unwrap();
        let side = cost.nrows().min(cost.ncols()) as f64;
        prop_assert!((shifted.total_cost - base.total_cost - side * shift).abs() < 1e-8);
    }

    #[test]
    fn distribution_columns_sum_to_one(gamma in gamma_matrix(), tau in 0.01f64..0.99) {
        let d = column_softmax(gamma.view());
        for col in d.axis_iter(Axis(1)) {
            prop_assert!((col.sum() - 1.0).abs() < 1e-6);
        }
        let m = threshold_match(d.view(), tau);
        for (&x, &b) in d.iter().zip(m.iter()) {
            prop_assert_eq!(b, u8::from(x >= tau));
        }
        let (_, unseen) = split_indices(m.view());
        let zero_rows: Vec<usize> = (0..m.nrows()).filter(|&i| m.row(i).iter().all(|&b| b == 0)).collect();
        prop_assert_eq!(unseen, zero_rows);
    }

    #[test]
    fn row_permutation_is_equivariant(gamma in gamma_matrix(), seed in any::<u64>()) {
        let k = gamma.nrows();
        let mut perm: Vec<usize> = (0..k).collect();
        let mut state = seed;
        for i in (1..k).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (state >> 33) as usize % (i + 1));
        }
        let permuted = gamma.select(Axis(0), &perm);
        let d = column_softmax(gamma.view());
        let dp = column_softmax(permuted.view());
        for (new, &old) in perm.iter().enumerate() {
            for j in 0..gamma.ncols() {
                prop_assert!((dp[[new, j]] - d[[old, j]]).abs() < 1e-12);
            }
        }
        let (_, unseen) = split_indices(threshold_match(d.view(), 0.3).view());
        let (_, unseen_p) = split_indices(threshold_match(dp.view(), 0.3).view());
        let mut mapped: Vec<usize> = unseen_p.iter().map(|&i| perm[i]).collect();
        mapped.sort_unstable();
        prop_assert_eq!(mapped, unseen);
    }

    #[test]
    fn h_score_is_symmetric_and_bounded(s in 0.0f64..=1.0, u in 0.0f64..=1.0) {
        let h = h_score(s, u);
        prop_assert_eq!(h, h_score(u, s));
        prop_assert!(h <= s.max(u) + 1e-15);
        prop_assert!(h >= s.min(u) - 1e-15 || s + u == 0.0);
    }

    #[test]
    fn unseen_accuracy_ignores_discovered_id_names(
        pairs in prop::collection::vec((0u32..6, 0u32..5), 1..60),
        shift in 1u32..20,
    ) {
        let seen = 2;
        let catalog = ClassCatalog::new(seen, None).unwrap();
        // Truth ids start at the seen boundary so every sample is unseen-truth.
        let truth: Vec<u32> = pairs.iter().map(|&(_, t)| t + seen as u32).collect();
        let ids: Vec<u32> = pairs.iter().map(|&(p, _)| p).collect();
        let pred = PredictionSet { assignments: ids.clone(), confidences: vec![1.0; ids.len()] };
        let renamed = PredictionSet {
            assignments: ids.iter().map(|&p| if p < seen as u32 { p } else { p + shift }).collect(),
            confidences: vec![1.0; ids.len()],
        };
        let (a, _) = unseen_accuracy(&pred, &truth, &catalog).unwrap();
        let (b, _) = unseen_accuracy(&renamed, &truth, &catalog).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn cef_round_trip_is_bitwise(
        n in 0usize..12,
        d in 1usize..9,
        seed in any::<u64>(),
        labeled in any::<bool>(),
    ) {
        let mut state = seed | 1;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 40) as f32 / (1u64 << 24) as f32 - 0.5
        };
        let raw = Array2::from_shape_fn((n, d), |(_, j)| next() + if j == 0 { 2.0 } else { 0.0 });
        let labels = labeled.then(|| (0..n as u32).map(|i| i % 3).collect());
        let set = EmbeddingSet::new(raw, labels).unwrap();
        let back = decode_cef(&encode_cef(&set)).unwrap();
        prop_assert_eq!(back.labels(), set.labels());
        for (a, b) in back.vectors().iter().zip(set.vectors().iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kmeans_is_deterministic_and_inertia_never_rises(
        points in prop::collection::vec(-5.0f64..5.0, 60),
        k in 1usize..6,
        seed in any::<u64>(),
    ) {
        let pts = Array2::from_shape_vec((20, 3), points).unwrap();
        let a = kmeans_fit_matrix(pts.view(), k, seed, 100, 0.0).unwrap();
        let b = kmeans_fit_matrix(pts.view(), k, seed, 100, 0.0).unwrap();
        prop_assert_eq!(&a, &b);
        for w in a.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
        }
        prop_assert!(a.cluster_sizes().iter().all(|&s| s > 0));
    }
}
