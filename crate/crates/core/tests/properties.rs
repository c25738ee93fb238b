use std::collections::BTreeSet;

use fedcrf::autograd::Graph;
use fedcrf::backbone::{bpr_loss, propagate, BipartiteGraph, IdEmbeddings};
use fedcrf::checkpoint::{Checkpoint, Tensor};
use fedcrf::datamodel::{split_dataset, Interaction, InteractionDataset, SplitRatios};
use fedcrf::eval::{rank_full, top_k};
use fedcrf::fgsat::{attention_fuse, transfer_operator_var};
use fedcrf::finetune::{build_semantic_graph, contrastive_loss, GraphSource};
use fedcrf::server::{kmeans, DomainStats, KMeansOptions};
use fedcrf::Matrix;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v))
}

fn sized_matrix(rows: std::ops::RangeInclusive<usize>, cols: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Matrix> {
    (rows, cols).prop_flat_map(|(r, c)| matrix(r, c))
}

fn nonzero_rows(m: &Matrix) -> bool {
    m.row_norms().iter().all(|&n| n > 1e-3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_every_interaction(
        pairs in prop::collection::vec((0usize..6, 0usize..12), 1..60),
        seed in any::<u64>(),
    ) {
        let inter = pairs.iter().map(|&(user, item)| Interaction { user, item, timestamp: None }).collect();
        let ds = InteractionDataset::from_dense("p", 6, 12, inter).unwrap();
        let s = split_dataset(&ds, SplitRatios::default(), seed).unwrap();
        let mut all: Vec<usize> = s.splits.train.iter().chain(&s.splits.valid).chain(&s.splits.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..s.interactions.len()).collect::<Vec<_>>());
        for u in 0..6 {
            let n = s.interactions.iter().filter(|x| x.user == u).count();
            let valid = s.splits.valid.iter().filter(|&&i| s.interactions[i].user == u).count();
            let test = s.splits.test.iter().filter(|&&i| s.interactions[i].user == u).count();
            if n < 3 {
                prop_assert_eq!((valid, test), (0, 0));
            } else {
                prop_assert_eq!(valid, (0.1 * n as f64 + 1e-9).floor() as usize);
                prop_assert_eq!(test, ((0.1 * n as f64 + 1e-9).floor() as usize).max(1));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip(m in sized_matrix(0..=5, 1..=4), idx in prop::collection::vec(0usize..1000, 0..10)) {
        let mut ck = Checkpoint::default();
        ck.push(Tensor::from_matrix("m", &m));
        ck.push(Tensor::from_indices("i", &idx));
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        let got = back.matrix("m").unwrap();
        let want = m.map(|v| v as f32 as f64);
        prop_assert_eq!(got.data(), want.data());
        prop_assert_eq!(back.get("i").unwrap().to_indices().unwrap(), idx);
    }

    #[test]
    fn semantic_graph_is_symmetric_and_covers_every_row(reprs in sized_matrix(2..=12, 2..=5), top in 1usize..5) {
        let g = build_semantic_graph(&reprs, top, GraphSource::Local).unwrap();
        let a = g.adjacency.to_dense();
        for i in 0..a.rows() {
            prop_assert!(a.row(i).iter().any(|&v| v > 0.0));
            for j in 0..a.cols() {
                prop_assert!(a.get(i, j) >= 0.0);
                prop_assert!((a.get(i, j) - a.get(j, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transfer_operator_is_symmetric_with_positive_entries(z in sized_matrix(1..=10, 2..=4)) {
        prop_assume!(nonzero_rows(&z));
        let mut g = Graph::new();
        let zv = g.constant(z);
        let l = transfer_operator_var(&mut g, zv);
        let l = g.value(l);
        for i in 0..l.rows() {
            for j in 0..l.cols() {
                prop_assert!(l.get(i, j) >= 0.0 && l.get(i, j) <= 1.0 + 1e-12);
                prop_assert!((l.get(i, j) - l.get(j, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_output_is_a_convex_combination(
        v in prop::collection::vec(-3.0f64..3.0, 9),
        w in matrix(3, 1),
        b in -2.0f64..2.0,
    ) {
        let (fused, q) = attention_fuse(&v[0..3], &v[3..6], &v[6..9], &w, b);
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(q.iter().all(|&x| x > 0.0));
        for d in 0..3 {
            let vals = [v[d], v[3 + d], v[6 + d]];
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(fused[d] >= lo - 1e-12 && fused[d] <= hi + 1e-12);
        }
    }

    #[test]
    fn contrastive_loss_ignores_row_scale(a in matrix(4, 3), b in matrix(4, 3), s in prop::collection::vec(0.1f64..10.0, 4)) {
        prop_assume!(nonzero_rows(&a) && nonzero_rows(&b));
        let mut scaled = a.clone();
        for (r, k) in s.iter().enumerate() {
            scaled.row_mut(r).iter_mut().for_each(|v| *v *= k);
        }
        for standard in [false, true] {
            let x = contrastive_loss(&a, &b, 0.5, standard).unwrap();
            let y = contrastive_loss(&scaled, &b, 0.5, standard).unwrap();
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn unweighted_kmeans_inertia_never_rises(points in sized_matrix(3..=20, 1..=3), k in 1usize..4, seed in any::<u64>()) {
        let distinct: BTreeSet<Vec<u64>> = (0..points.rows()).map(|r| points.row(r).iter().map(|v| v.to_bits()).collect()).collect();
        prop_assume!(distinct.len() >= k);
        let opts = KMeansOptions { k, weighted: false, seed, n_init: 1, ..KMeansOptions::default() };
        let res = kmeans(&points, &opts, None).unwrap();
        for w in res.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9);
        }
        let sse: f64 = (0..points.rows())
            .map(|r| points.row(r).iter().zip(res.centers.row(res.assignments[r])).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum();
        prop_assert!((sse - res.inertia).abs() < 1e-9 * (1.0 + sse));
    }

    #[test]
    fn top_k_is_a_prefix_of_the_full_ranking(
        scores in prop::collection::vec(-2i32..3, 1..20),
        masked in prop::collection::btree_set(0usize..20, 0..5),
        k in 0usize..25,
    ) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let masked: Vec<usize> = masked.into_iter().collect();
        let full = rank_full(&scores, &masked);
        let top = top_k(&scores, &masked, k);
        prop_assert_eq!(&full[..k.min(full.len())], &top[..]);
        prop_assert!(top.iter().all(|i| !masked.contains(i)));
    }

    #[test]
    fn denormalize_inverts_normalize(t in sized_matrix(1..=6, 3..=3), mean in prop::collection::vec(-2.0f64..2.0, 3), var in prop::collection::vec(0.01f64..5.0, 3)) {
        let stats = DomainStats { mean, var, ..DomainStats::new(3) };
        let back = stats.denormalize(&stats.normalize(&t));
        prop_assert!(back.max_abs_diff(&t) < 1e-9);
    }

    #[test]
    fn propagation_is_linear(
        e1 in matrix(9, 2),
        e2 in matrix(9, 2),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        edges in prop::collection::btree_set((0usize..4, 0usize..5), 1..12),
    ) {
        let graph = BipartiteGraph::new(4, 5, edges.into_iter().collect()).unwrap();
        let split = |m: &Matrix| IdEmbeddings { users: m.slice_rows(0, 4), items: m.slice_rows(4, 9) };
        let mix = e1.scale(a).add(&e2.scale(b));
        let (u, i) = propagate(&graph, &split(&mix), 2);
        let (u1, i1) = propagate(&graph, &split(&e1), 2);
        let (u2, i2) = propagate(&graph, &split(&e2), 2);
        prop_assert!(u.max_abs_diff(&u1.scale(a).add(&u2.scale(b))) < 1e-9);
        prop_assert!(i.max_abs_diff(&i1.scale(a).add(&i2.scale(b))) < 1e-9);
    }

    #[test]
    fn bpr_decreases_with_margin(m in -30.0f64..30.0, d in 0.01f64..5.0) {
        let lo = bpr_loss(&[m], &[0.0]).unwrap();
        let hi = bpr_loss(&[m + d], &[0.0]).unwrap();
        prop_assert!(hi < lo);
        prop_assert!(lo > 0.0);
    }
}
