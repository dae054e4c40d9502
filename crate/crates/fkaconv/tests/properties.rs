//! Property tests over random inputs: grid search equals brute force,
//! neighborhood normalization respects rigid motions, and the sampling
//! strategies keep their selection contracts.

use proptest::prelude::*;

use fkaconv::geometry::{knn, knn_grid, normalize_neighborhoods};
use fkaconv::sampling::{
    farthest_point_sampling, quantized_sampling, random_sampling, rejection_sampling,
    voxel_size_rule,
};
use fkaconv::PointCloud;

fn arb_cloud(max_points: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(
        (
            -1.0f64..1.0,
            -1.0f64..1.0,
            -1.0f64..1.0,
        ),
        1..max_points,
    )
    .prop_map(|pts| {
        PointCloud::new(pts.into_iter().map(|(x, y, z)| [x, y, z]).collect()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_grid_matches_brute_force(cloud in arb_cloud(60), k in 1usize..9) {
        let ids: Vec<u32> = (0..cloud.len() as u32).collect();
        let brute = knn(&cloud, &ids, k).unwrap();
        let grid = knn_grid(&cloud, &ids, k).unwrap();
        prop_assert_eq!(brute, grid);
    }

    #[test]
    fn knn_rows_sorted_and_self_first(cloud in arb_cloud(40)) {
        let k = 4usize.min(cloud.len());
        let ids: Vec<u32> = (0..cloud.len() as u32).collect();
        let index = knn_grid(&cloud, &ids, k).unwrap();
        for s in 0..cloud.len() {
            let q = cloud.point(s);
            let row = index.row(s);
            prop_assert_eq!(row[0] as usize, s);
            let mut last = -1.0f64;
            for &nb in row {
                let p = cloud.point(nb as usize);
                let d = (p[0]-q[0]).powi(2) + (p[1]-q[1]).powi(2) + (p[2]-q[2]).powi(2);
                prop_assert!(d >= last);
                last = d;
            }
        }
    }

    #[test]
    fn normalization_rotation_equivariant(cloud in arb_cloud(40), angle in 0.0f64..std::f64::consts::TAU) {
        let k = 4usize.min(cloud.len());
        let ids: Vec<u32> = (0..cloud.len() as u32).collect();
        let index = knn(&cloud, &ids, k).unwrap();
        let base = normalize_neighborhoods(&cloud, &index, 0.7).unwrap();

        let (s, c) = angle.sin_cos();
        let rotate = |p: [f64; 3]| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]];
        let rotated = PointCloud::new(cloud.coords().iter().map(|&p| rotate(p)).collect()).unwrap();
        // identical indices: rotation preserves distances, ties included
        let rindex = knn(&rotated, &ids, k).unwrap();
        prop_assert_eq!(&rindex, &index);
        let rot = normalize_neighborhoods(&rotated, &rindex, 0.7).unwrap();
        for (chunk, rchunk) in base
            .local_coords
            .chunks(3)
            .zip(rot.local_coords.chunks(3))
        {
            let expected = rotate([chunk[0], chunk[1], chunk[2]]);
            for a in 0..3 {
                prop_assert!((expected[a] - rchunk[a]).abs() < 1e-6);
            }
        }
        prop_assert!((base.batch_mean_radius - rot.batch_mean_radius).abs() < 1e-9);
    }

    #[test]
    fn samplers_select_exactly_q_unique(cloud in arb_cloud(80), frac in 0.1f64..1.0, seed in 0u64..1000) {
        let q = ((cloud.len() as f64 * frac) as usize).clamp(1, cloud.len());
        for report in [
            quantized_sampling(&cloud, q, seed).unwrap(),
            random_sampling(&cloud, q, seed).unwrap(),
            farthest_point_sampling(&cloud, q, seed).unwrap(),
            rejection_sampling(&cloud, q, 4, seed).unwrap(),
        ] {
            prop_assert_eq!(report.selected.len(), q);
            let mut sorted = report.selected.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), q);
            prop_assert!(sorted.iter().all(|&i| (i as usize) < cloud.len()));
        }
    }

    #[test]
    fn samplers_deterministic_in_seed(cloud in arb_cloud(60), seed in 0u64..1000) {
        let q = (cloud.len() / 2).max(1);
        let a = quantized_sampling(&cloud, q, seed).unwrap();
        let b = quantized_sampling(&cloud, q, seed).unwrap();
        prop_assert_eq!(a.selected, b.selected);
        let a = rejection_sampling(&cloud, q, 3, seed).unwrap();
        let b = rejection_sampling(&cloud, q, 3, seed).unwrap();
        prop_assert_eq!(a.selected, b.selected);
        let a = farthest_point_sampling(&cloud, q, seed).unwrap();
        let b = farthest_point_sampling(&cloud, q, seed).unwrap();
        prop_assert_eq!(a.selected, b.selected);
        let a = random_sampling(&cloud, q, seed).unwrap();
        let b = random_sampling(&cloud, q, seed).unwrap();
        prop_assert_eq!(a.selected, b.selected);
    }

    #[test]
    fn quantized_full_coverage_and_first_pass_spread(cloud in arb_cloud(60), seed in 0u64..100) {
        // q = N selects every point
        let n = cloud.len();
        let full = quantized_sampling(&cloud, n, seed).unwrap();
        let mut sel = full.selected.clone();
        sel.sort_unstable();
        prop_assert_eq!(sel, (0..n as u32).collect::<Vec<u32>>());

        // single-pass selections live in pairwise distinct voxels
        if cloud.bounding_diag() > 0.0 && n >= 2 {
            let q = (n / 2).max(1);
            let report = quantized_sampling(&cloud, q, seed).unwrap();
            if report.iterations == 1 {
                let v = voxel_size_rule(cloud.bounding_diag(), q).unwrap();
                let (lo, _) = cloud.bounding_box();
                let mut keys = std::collections::HashSet::new();
                for &i in &report.selected {
                    let p = cloud.point(i as usize);
                    let key = (
                        ((p[0] - lo[0]) / v).floor() as i64,
                        ((p[1] - lo[1]) / v).floor() as i64,
                        ((p[2] - lo[2]) / v).floor() as i64,
                    );
                    prop_assert!(keys.insert(key), "two selections share a voxel");
                }
            }
        }
    }
}
