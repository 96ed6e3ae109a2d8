use proptest::prelude::*;

use dyna_ood::bounds;
use dyna_ood::data::DiscreteAction;
use dyna_ood::filter::{dynamic_keep_mask, elimination_fraction};
use dyna_ood::index::{ExactIndex, HnswIndex, HnswParams, NnIndex};
use dyna_ood::model::{KdeModel, Kernel};

fn points(dim: usize, max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0..10.0f64, dim), 1..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_index_matches_linear_scan(pts in points(3, 200), q in prop::collection::vec(-10.0..10.0f64, 3)) {
        let mut idx = ExactIndex::new(3);
        for p in &pts {
            idx.insert(p).unwrap();
        }
        let brute = pts
            .iter()
            .map(|p| p.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min);
        let (d, id) = idx.nn_distance(&q).unwrap();
        prop_assert!((d - brute).abs() <= 1e-12 * brute.max(1.0));
        let p = idx.point(id).unwrap();
        let back = p.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!((back - d).abs() <= 1e-12 * d.max(1.0));
    }

    #[test]
    fn hnsw_never_beats_exact(pts in points(4, 300), q in prop::collection::vec(-10.0..10.0f64, 4), seed in 0u64..1000) {
        let mut exact = ExactIndex::new(4);
        let mut hnsw = HnswIndex::new(4, HnswParams { seed, ..Default::default() });
        for p in &pts {
            exact.insert(p).unwrap();
            hnsw.insert(p).unwrap();
        }
        let (de, _) = exact.nn_distance(&q).unwrap();
        let (dh, _) = hnsw.nn_distance(&q).unwrap();
        prop_assert!(dh >= de - 1e-12);
    }

    #[test]
    fn stored_points_are_found_at_distance_zero(pts in points(2, 150)) {
        let mut hnsw = HnswIndex::new(2, HnswParams::default());
        for p in &pts {
            hnsw.insert(p).unwrap();
        }
        for p in &pts {
            prop_assert_eq!(hnsw.nn_distance(p).unwrap().0, 0.0);
        }
    }

    #[test]
    fn kde_mean_in_hull_and_variance_nonnegative(
        nexts in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 2), 1..60),
        states in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 2), 60),
        q in prop::collection::vec(-1.0..1.0f64, 2),
        h in 0.05..2.0f64,
    ) {
        let mut kde = KdeModel::new(2, 2, Kernel::Gaussian, h);
        for (i, (x, s)) in nexts.iter().zip(&states).enumerate() {
            kde.add(s, DiscreteAction(i % 2), x).unwrap();
        }
        if let Ok(m) = kde.moments(&q, DiscreteAction(0)) {
            for d in 0..2 {
                let lo = nexts.iter().map(|x| x[d]).fold(f64::INFINITY, f64::min);
                let hi = nexts.iter().map(|x| x[d]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(m.mean[d] >= lo - 1e-9 && m.mean[d] <= hi + 1e-9);
                prop_assert!(m.var[d] >= 0.0);
            }
            prop_assert!(m.n_eff > 0.0 && m.n_eff <= nexts.len() as f64 + 1e-9);
        }
    }

    #[test]
    fn schedule_is_monotone_and_bounded(k_total in 2usize..200, l in 1usize..50) {
        let f: Vec<f64> = (1..=k_total).map(|k| elimination_fraction(k_total, l, k).unwrap()).collect();
        prop_assert!((f[0] - (l as f64 - 1.0) / l as f64).abs() < 1e-12);
        prop_assert_eq!(*f.last().unwrap(), 0.0);
        prop_assert!(f.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn dynamic_mask_drops_the_farthest(dists in prop::collection::vec(0.0..10.0f64, 0..200), f in 0.0..1.0f64) {
        let (mask, eps) = dynamic_keep_mask(&dists, f);
        let dropped = mask.iter().filter(|k| !**k).count();
        prop_assert!(dropped as f64 >= f * dists.len() as f64 - 1e-9);
        prop_assert!((dropped as f64) < f * dists.len() as f64 + 1.0);
        for (d, k) in dists.iter().zip(&mask) {
            if *k {
                prop_assert!(*d <= eps);
            } else {
                prop_assert!(*d >= eps);
            }
        }
    }

    #[test]
    fn chebyshev_radius_grows_as_eps_shrinks(s in 0.01..5.0f64, sh in 0.01..5.0f64, gap in 0.0..3.0f64, e in 0.01..0.5f64) {
        let r1 = bounds::chebyshev_radius(s, sh, e, gap);
        let r2 = bounds::chebyshev_radius(s, sh, e / 2.0, gap);
        prop_assert!(r2 > r1 && r1 >= gap);
    }
}
