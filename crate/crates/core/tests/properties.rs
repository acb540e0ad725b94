use ndarray::Array2;
use proptest::prelude::*;

use peg_core::clustering::{canonicalize, dbscan, k_reciprocal_jaccard, pairwise_l2};
use peg_core::embedder::HyperParams;
use peg_core::evolution::mutate;
use peg_core::metrics::{kendall_tau, label_accuracy, spearman_rho};
use peg_core::seed;

fn points() -> impl Strategy<Value = Array2<f64>> {
    (6usize..24, 2usize..5).prop_flat_map(|(n, d)| {
        prop::collection::vec(-5.0f64..5.0, n * d).prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap())
    })
}

fn hyper() -> impl Strategy<Value = HyperParams> {
    (0.01f64..0.9, 0.0f64..2.0, 0.0f64..2.0, 0.0f64..2.0, 0.0f64..2.0, 1e-4f64..0.1).prop_map(
        |(eps, w_id, w_tri, w_mid, w_mtri, lr)| HyperParams {
            eps,
            w_id,
            w_tri,
            w_mid,
            w_mtri,
            lr,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jaccard_is_a_symmetric_unit_distance(x in points(), k1 in 2usize..6) {
        let n = x.nrows();
        let dist = k_reciprocal_jaccard(x.view(), k1.min(n - 1), 2).unwrap();
        for i in 0..n {
            prop_assert_eq!(dist.get(i, i), 0.0);
            for j in 0..n {
                let d = dist.get(i, j);
                prop_assert!((0.0..=1.0).contains(&d));
                prop_assert_eq!(d, dist.get(j, i));
            }
        }
    }

    #[test]
    fn dbscan_labels_are_canonical(x in points(), eps in 0.1f64..4.0, min_samples in 1usize..5) {
        let a = dbscan(&pairwise_l2(x.view()), eps, min_samples).unwrap();
        prop_assert_eq!(a.labels.len(), x.nrows());
        prop_assert_eq!(canonicalize(&a.labels), a.labels.clone());
        prop_assert_eq!(a.sizes().iter().sum::<usize>() + a.num_outliers(), x.nrows());
        prop_assert!(a.sizes().iter().all(|&s| s >= min_samples.max(1)));
    }

    #[test]
    fn canonicalize_is_idempotent(labels in prop::collection::vec(-2i32..8, 0..40)) {
        let once = canonicalize(&labels);
        prop_assert_eq!(canonicalize(&once), once.clone());
        for (a, b) in labels.iter().zip(&once) {
            prop_assert_eq!(*a < 0, *b < 0);
        }
    }

    #[test]
    fn mutation_stays_in_range(h in hyper(), r in 0.0f64..0.9, s in any::<u64>()) {
        let m = mutate(&h, r, &mut seed::rng(s));
        for (v, x) in m.to_array().iter().zip(h.to_array()) {
            prop_assert!(*v >= (1.0 - r) * x - 1e-12 && *v <= (1.0 + r) * x + 1e-12);
        }
        prop_assert!(m.eps <= 0.99);
    }

    #[test]
    fn rank_correlations_are_bounded(xs in prop::collection::vec(-1e3f64..1e3, 3..30), s in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut ys = xs.clone();
        ys.shuffle(&mut seed::rng(s));
        if let (Ok(rho), Ok(tau)) = (spearman_rho(&xs, &ys), kendall_tau(&xs, &ys)) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&rho));
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&tau));
            prop_assert!((spearman_rho(&xs, &xs).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn purity_of_the_truth_is_one(gt in prop::collection::vec(0i32..6, 1..40)) {
        prop_assert_eq!(label_accuracy(&gt, &gt).unwrap(), 1.0);
    }
}
