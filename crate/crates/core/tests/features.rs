use amyparc::features::{
    augment, dilate_clusters, extract_features, gaussian, intersection_features, smooth_clusters, ClusterIntersectionMap,
    SmoothingConfig,
};
use amyparc::voxelgrid::{distance_field, Connectivity, Mask, VoxelGrid};
use proptest::prelude::*;

fn instance() -> impl Strategy<Value = (Mask, ClusterIntersectionMap)> {
    (2usize..6, 2usize..6, 1usize..4, 1usize..5).prop_flat_map(|(x, y, z, k)| {
        let n = x * y * z;
        (
            proptest::collection::vec(0u8..4, n),
            proptest::collection::vec(proptest::collection::vec(0..n, 0..4), k),
        )
            .prop_map(move |(keep, clusters)| {
                let g = VoxelGrid::with_dims([x, y, z]).unwrap();
                // keep about three quarters of the grid
                let voxels: Vec<usize> = keep.iter().enumerate().filter(|(_, &v)| v > 0).map(|(i, _)| i).collect();
                let voxels = if voxels.is_empty() { vec![0] } else { voxels };
                let mask = Mask::new(g, voxels).unwrap();
                let clusters = clusters.into_iter().map(|c| c.into_iter().filter(|v| mask.contains(*v)).collect()).collect();
                (mask, ClusterIntersectionMap::new(g, clusters).unwrap())
            })
    })
}

proptest! {
    #[test]
    fn dilation_and_smoothing_are_idempotent((mask, clusters) in instance(), sigma in 0.3f64..3.0) {
        let cfg = SmoothingConfig { sigma, connectivity: Connectivity::TwentySix };
        let binary = intersection_features(&clusters, &mask).unwrap();
        let once = dilate_clusters(&binary, &clusters, &mask, cfg.connectivity);
        let twice = dilate_clusters(&once, &clusters, &mask, cfg.connectivity);
        prop_assert_eq!(once.values(), twice.values());

        let s1 = smooth_clusters(&once, &clusters, &mask, &cfg).unwrap().field;
        let s2 = smooth_clusters(&s1, &clusters, &mask, &cfg).unwrap().field;
        prop_assert_eq!(s1.values(), s2.values());
    }

    #[test]
    fn values_in_unit_interval_and_decay_with_distance((mask, clusters) in instance(), sigma in 0.3f64..3.0) {
        let cfg = SmoothingConfig { sigma, connectivity: Connectivity::Six };
        let out = extract_features(&clusters, &mask, &cfg).unwrap();
        let binary = intersection_features(&clusters, &mask).unwrap();
        let k = clusters.k();
        for j in 0..k {
            let col: Vec<f64> = out.field.vectors().map(|v| v[j]).collect();
            if clusters.cluster(j).is_empty() {
                prop_assert!(out.empty_clusters.contains(&j));
                prop_assert!(col.iter().all(|&v| v == 0.0));
                continue;
            }
            prop_assert!(col.iter().all(|&v| v > 0.0 && v <= 1.0));
            // dilation may set a far voxel to 1 while a nearer one keeps G(d),
            // so decay is checked on the smoothed binary map
            let d = distance_field(&mask, clusters.cluster(j)).unwrap().values;
            let smoothed = smooth_clusters(&binary, &clusters, &mask, &cfg).unwrap().field;
            for (a, &da) in d.iter().enumerate() {
                prop_assert!(col[a] >= gaussian(da, sigma));
                for (b, &db) in d.iter().enumerate() {
                    if da < db {
                        prop_assert!(smoothed.vector(a)[j] >= smoothed.vector(b)[j]);
                    }
                }
            }
        }
        if out.empty_clusters.is_empty() {
            prop_assert!(out.field.zero_vectors().is_empty());
        }
    }

    #[test]
    fn augmentation_rotates_and_keeps_row_sums(v in proptest::collection::vec(0.0f64..1.0, 1..20)) {
        let k = v.len();
        let a = augment(&v);
        let sum: f64 = v.iter().sum();
        for r in 0..k {
            let row = a.row(r);
            prop_assert!((row.iter().sum::<f64>() - sum).abs() <= 1e-12);
            for c in 0..k {
                prop_assert_eq!(row[c], v[(c + r) % k]);
            }
        }
        // every column is also a cyclic rotation of the base vector
        for c in 0..k {
            let col: Vec<f64> = (0..k).map(|r| a.row(r)[c]).collect();
            prop_assert!((0..k).any(|s| (0..k).all(|i| col[i] == v[(i + s) % k])));
        }
    }
}
