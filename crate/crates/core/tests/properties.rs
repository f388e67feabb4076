use nalgebra::{DMatrix, Point3};
use proptest::prelude::*;
use soap3d::geom::{self, PointCloud, ScanRecord};
use soap3d::head::{self, HeadParams, StageFlags};
use soap3d::localfeat::LocalFeatureSet;
use soap3d::retrieval::{self, Exclusion, Query};
use soap3d::trainer;

fn points(max: usize) -> impl Strategy<Value = Vec<Point3<f64>>> {
    prop::collection::vec((-20.0..20.0f64, -20.0..20.0f64, -5.0..5.0f64), 1..max)
        .prop_map(|v| v.into_iter().map(|(x, y, z)| Point3::new(x, y, z)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn voxel_centroids_stay_in_their_cells(pts in points(200), grid in 0.05..3.0f64) {
        let v = geom::voxelize(&PointCloud::new(pts.clone()).unwrap(), grid).unwrap();
        prop_assert!(v.voxel_keys.windows(2).all(|w| w[0] < w[1]));
        for (c, k) in v.centroids.iter().zip(&v.voxel_keys) {
            prop_assert_eq!(geom::voxel_key(c, grid), *k);
        }
        let mut keys: Vec<_> = pts.iter().map(|p| geom::voxel_key(p, grid)).collect();
        keys.sort();
        keys.dedup();
        prop_assert_eq!(keys, v.voxel_keys);
    }

    #[test]
    fn head_is_unit_norm_and_order_free(
        rows in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 4), 2..30),
        bits in 0u8..8,
        h in 0.2..1.0f64,
        seed in 0u64..1000,
    ) {
        let n = rows.len();
        let f = DMatrix::from_row_iterator(n, 4, rows.iter().flatten().copied());
        let rev = DMatrix::from_row_iterator(n, 4, rows.iter().rev().flatten().copied());
        let p = HeadParams::init(4, 6, StageFlags::from_bits(bits).unwrap(), h, seed).unwrap();
        let a = head::head_forward(&LocalFeatureSet::new(f, 0).unwrap(), &p).unwrap().0 .0;
        let b = head::head_forward(&LocalFeatureSet::new(rev, 0).unwrap(), &p).unwrap().0 .0;
        prop_assert_eq!(&a, &b);
        let norm = a.norm();
        prop_assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recall_monotone_in_k_and_radius(
        seed in 0u64..10_000,
        n in 5usize..60,
        nq in 1usize..20,
    ) {
        use rand::Rng;
        let mut rng = soap3d::seed::rng(seed);
        let recs: Vec<ScanRecord> = (0..n)
            .map(|i| ScanRecord {
                scan_id: i as u64,
                timestamp: i as f64,
                position: Point3::new(rng.random_range(0.0..30.0), rng.random_range(0.0..30.0), 0.0),
                segment_id: rng.random_range(0..3),
                pass_id: 0,
            })
            .collect();
        let unit = |rng: &mut rand_chacha::ChaCha8Rng| {
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let rows: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng)).collect();
        let db = retrieval::build_db(&rows, &recs).unwrap();
        let queries: Vec<Query> = (0..nq)
            .map(|q| Query {
                id: 1000 + q as u64,
                descriptor: unit(&mut rng),
                position: Point3::new(rng.random_range(0.0..30.0), rng.random_range(0.0..30.0), 0.0),
                timestamp: 0.0,
                segment_id: 0,
            })
            .collect();
        let ranked = retrieval::rank_queries(&db, &queries, Exclusion::None).unwrap();
        let radii: Vec<f64> = (1..=20).map(f64::from).collect();
        if let Ok(sweep) = retrieval::segment_sweep(&ranked, &[1, 3, 10], &radii) {
            for k in [1, 3, 10] {
                let curve: Vec<usize> = sweep.overall.iter().filter(|p| p.k == k).map(|p| p.hits).collect();
                prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
            }
            for r in 0..radii.len() {
                let h: Vec<usize> = [0, 1, 2].iter().map(|&ki| sweep.overall[ki * radii.len() + r].hits).collect();
                prop_assert!(h[0] <= h[1] && h[1] <= h[2]);
            }
        }
        let pct = retrieval::k_for_percent(1.0, n);
        prop_assert_eq!(pct, ((n as f64) / 100.0).ceil().max(1.0) as usize);
    }

    #[test]
    fn hinge_is_nonnegative_and_piecewise_linear(ap in 0.0..3.0f64, an in 0.0..3.0f64, m in 0.01..2.0f64) {
        let l = trainer::hinge(ap, an, m);
        prop_assert!(l >= 0.0);
        if ap + m > an {
            prop_assert!((l - (ap - an + m)).abs() < 1e-15);
        } else {
            prop_assert_eq!(l, 0.0);
        }
    }

    #[test]
    fn sub_seeds_are_stable_and_distinct(root in any::<u64>()) {
        let a = soap3d::seed::sub_seed(root, "mining");
        prop_assert_eq!(a, soap3d::seed::sub_seed(root, "mining"));
        prop_assert_ne!(a, soap3d::seed::sub_seed(root, "init"));
        prop_assert_ne!(
            soap3d::seed::indexed_seed(root, "shuffle", 0),
            soap3d::seed::indexed_seed(root, "shuffle", 1)
        );
    }
}
