use proptest::prelude::*;

use longseq_core::attention::TokenGroup;
use longseq_core::baselines::{sparse_position_ids, sparse_position_route};
use longseq_core::clustering::{
    assign_clusters, kmeans, order_centroids_greedy, scatter_back, sort_and_chunk, Centroids, MemoryBank,
};
use longseq_core::nn::{softmax_rows, Matrix};
use longseq_core::sliding::{plan_chunks, LayerState};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (n(a) * n(b))
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(m in (1usize..6, 1usize..8).prop_flat_map(|(r, c)| matrix(r, c)), shift in -50.0f64..50.0) {
        let shifted = Matrix::from_vec(m.rows(), m.cols(), m.data().iter().map(|v| v + shift).collect()).unwrap();
        let a = softmax_rows(&m).unwrap();
        let b = softmax_rows(&shifted).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
        for r in 0..a.rows() {
            prop_assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sort_then_scatter_is_identity(
        (assignment, states) in (1usize..64, 1usize..9).prop_flat_map(|(t, p)| {
            (prop::collection::vec(0..p, t), matrix(t, 3))
        }),
        m in 1usize..17,
    ) {
        let t = assignment.len();
        let flat = TokenGroup::new(states.clone(), (0..t as i64).collect()).unwrap();
        let (groups, route) = sort_and_chunk(&flat, assignment, m).unwrap();
        prop_assert!(groups.iter().all(|g| g.len() <= m));
        let outputs: Vec<Matrix> = groups.into_iter().map(|g| g.states).collect();
        prop_assert_eq!(scatter_back(&outputs, &route).unwrap(), states);
    }

    #[test]
    fn routing_order_is_a_stable_sort(assignment in prop::collection::vec(0usize..8, 1..64), m in 1usize..17) {
        let t = assignment.len();
        let flat = TokenGroup::new(Matrix::zeros(t, 1), vec![0; t]).unwrap();
        let (_, route) = sort_and_chunk(&flat, assignment.clone(), m).unwrap();
        // insertion sort is stable by construction
        let mut oracle: Vec<usize> = Vec::new();
        for i in 0..t {
            let at = oracle.iter().position(|&j| assignment[j] > assignment[i]).unwrap_or(oracle.len());
            oracle.insert(at, i);
        }
        prop_assert_eq!(route.order(), &oracle[..]);
        for (pos, &row) in route.order().iter().enumerate() {
            prop_assert_eq!(route.inverse()[row], pos);
        }
    }

    #[test]
    fn assignment_ignores_positive_row_scale(
        rows in matrix(12, 4),
        raw in matrix(5, 4),
        exp in -20i32..20,
    ) {
        let centroids = Centroids::from_raw(&raw, 0).unwrap();
        let scaled = rows.scale(2f64.powi(exp));
        prop_assert_eq!(assign_clusters(&rows, &centroids).unwrap(), assign_clusters(&scaled, &centroids).unwrap());
    }

    #[test]
    fn assignment_picks_highest_cosine(rows in matrix(10, 3), raw in matrix(4, 3)) {
        let centroids = Centroids::from_raw(&raw, 0).unwrap();
        let assigned = assign_clusters(&rows, &centroids).unwrap();
        for (i, &c) in assigned.iter().enumerate() {
            let best = (0..4).map(|j| cosine(rows.row(i), centroids.vectors().row(j))).fold(f64::MIN, f64::max);
            prop_assert!(cosine(rows.row(i), centroids.vectors().row(c)) >= best - 1e-12);
        }
    }

    #[test]
    fn greedy_tour_steps_to_nearest_unused(raw in matrix(7, 3)) {
        let tour = order_centroids_greedy(&raw).unwrap();
        prop_assert_eq!(tour.row(0), raw.row(0));
        let mut remaining: Vec<usize> = (1..raw.rows()).collect();
        for i in 1..tour.rows() {
            let at = remaining.iter().position(|&j| tour.row(i) == raw.row(j));
            prop_assert!(at.is_some(), "tour row {} is not an unused input row", i);
            let chosen = remaining.remove(at.unwrap());
            let c = cosine(tour.row(i - 1), raw.row(chosen));
            for &j in &remaining {
                prop_assert!(cosine(tour.row(i - 1), raw.row(j)) <= c + 1e-12);
            }
        }
    }

    #[test]
    fn lloyd_sse_never_increases(points in (2usize..40).prop_flat_map(|n| matrix(n, 2)), p in 1usize..5, seed in any::<u64>()) {
        let p = p.min(points.rows());
        let result = kmeans(&points, p, 25, seed).unwrap();
        for w in result.sse_history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{:?}", result.sse_history);
        }
        prop_assert_eq!(result.assignment.len(), points.rows());
        prop_assert!(result.assignment.iter().all(|&c| c < p));
    }

    #[test]
    fn bank_keeps_most_recent_rows(sizes in prop::collection::vec(0usize..9, 1..8), capacity in 1usize..20) {
        let mut bank = MemoryBank::new(2, capacity);
        let mut all: Vec<[f64; 2]> = Vec::new();
        for n in sizes {
            let rows: Vec<[f64; 2]> = (0..n).map(|i| [(all.len() + i) as f64, -((all.len() + i) as f64)]).collect();
            if n > 0 {
                bank.push(&Matrix::from_rows(&rows)).unwrap();
            }
            all.extend(rows);
        }
        let keep = all.len().min(capacity);
        prop_assert_eq!(bank.len(), keep);
        let expected: Vec<f64> = all[all.len() - keep..].iter().flatten().copied().collect();
        let contents = bank.to_matrix();
        prop_assert_eq!(contents.data(), &expected[..]);
    }

    #[test]
    fn sparse_position_groups_share_a_chunk_index(q in 0usize..3, x in 1usize..40, m in 1usize..8, extra in 0usize..4) {
        let layout = plan_chunks(q, x, m + extra, m).unwrap();
        let ids = sparse_position_ids(&layout);
        prop_assert_eq!(ids.len(), layout.flat_len());
        let route = sparse_position_route(&layout);
        let mut seen = vec![false; ids.len()];
        for group in route.groups() {
            prop_assert!(group.iter().all(|&r| ids[r] == ids[group[0]]));
            // one row per chunk that reaches this index, in chunk order
            prop_assert!(group.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(group.len() <= layout.chunks);
            for &r in group {
                prop_assert!(!seen[r]);
                seen[r] = true;
            }
        }
        prop_assert!(seen.into_iter().all(|s| s));
    }

    #[test]
    fn unflatten_inverts_flatten(q in 0usize..3, x in 1usize..30, m in 1usize..6, extra in 0usize..4, seed in any::<u64>()) {
        use rand::SeedableRng;
        let layout = plan_chunks(q, x, m + extra, m).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let question = Matrix::random_normal(q, 2, 1.0, &mut rng);
        let context = Matrix::random_normal(x, 2, 1.0, &mut rng);
        let state = LayerState::new(&question, context, layout).unwrap();
        let flat = state.flatten();
        prop_assert_eq!(flat.len(), layout.flat_len());
        prop_assert_eq!(LayerState::unflatten(&flat.states, layout).unwrap(), state);
    }
}
