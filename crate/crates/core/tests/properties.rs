use hunter_core::geometry::{bev_iou, normalize_yaw, BBox3D, Detection, PointCloud, Vec3};
use hunter_core::range_view::{LidarSpec, RangeImage};
use hunter_core::supervision::{BevGrid, Mask};
use hunter_core::track_filter::{filter_indices, FilterConfig};
use proptest::prelude::*;

fn spec() -> LidarSpec {
    LidarSpec::new(16, 64, -15.0, 15.0, 60.0).unwrap()
}

fn point() -> impl Strategy<Value = Vec3> {
    (-40.0..40.0f64, -40.0..40.0f64, -8.0..8.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn human_box() -> impl Strategy<Value = BBox3D> {
    (-10.0..10.0f64, -10.0..10.0f64, 0.2..2.0f64, 0.2..2.0f64, -3.2..3.2f64)
        .prop_map(|(x, y, l, w, yaw)| BBox3D::new(Vec3::new(x, y, 0.9), Vec3::new(l, w, 1.7), yaw).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn backprojection_is_a_subset_with_nearest_returns(pts in prop::collection::vec(point(), 0..300)) {
        let sp = spec();
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let img = RangeImage::project(&cloud, &sp);
        let back = img.backproject();
        prop_assert!(back.len() <= pts.len());
        for (idx, cell) in img.occupied() {
            prop_assert!(pts.contains(&cell.point));
            // No input point in the same cell is strictly nearer.
            for p in &pts {
                if let Some((r, c, range)) = sp.locate(p) {
                    if img.index(r, c) == idx {
                        prop_assert!(range >= cell.range);
                    }
                }
            }
        }
    }

    #[test]
    fn merge_never_loses_the_nearer_return(a in prop::collection::vec(point(), 0..200), b in prop::collection::vec(point(), 0..200)) {
        let sp = spec();
        let ia = RangeImage::project_points(&a, &sp, 0);
        let ib = RangeImage::project_points(&b, &sp, 1);
        let m = RangeImage::merge(&ia, &ib).unwrap();
        for idx in 0..sp.n_cells() {
            prop_assert_eq!(m.distance(idx), ia.distance(idx).min(ib.distance(idx)));
        }
        // An instance with no returns has no defined occlusion rate.
        match RangeImage::occlusion_rate(&ib, &m) {
            Ok(occ) => prop_assert!((0.0..=1.0).contains(&occ)),
            Err(_) => prop_assert_eq!(ib.occupied().count(), 0),
        }
    }

    #[test]
    fn yaw_normalization_is_idempotent(yaw in -50.0..50.0f64) {
        let n = normalize_yaw(yaw);
        prop_assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&n));
        prop_assert_eq!(normalize_yaw(n), n);
        prop_assert!(((n - yaw) / std::f64::consts::TAU - ((n - yaw) / std::f64::consts::TAU).round()).abs() < 1e-9);
    }

    #[test]
    fn bev_iou_is_symmetric_and_bounded(a in human_box(), b in human_box()) {
        let (ab, ba) = (bev_iou(&a, &b), bev_iou(&b, &a));
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!((-1e-12..=1.0 + 1e-9).contains(&ab));
        prop_assert!((bev_iou(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mask_algebra_laws(bits_a in prop::collection::vec(any::<bool>(), 48), bits_b in prop::collection::vec(any::<bool>(), 48)) {
        let g = BevGrid::new([0.0, 1.2], [0.0, 1.6], 0.2).unwrap();
        let a = Mask::from_bits(g, bits_a).unwrap();
        let b = Mask::from_bits(g, bits_b).unwrap();
        let u = a.or(&b).unwrap();
        prop_assert!(a.is_subset_of(&u) && b.is_subset_of(&u));
        prop_assert_eq!(a.not().not(), a.clone());
        let mut bytes = Vec::new();
        u.write_to(&mut bytes).unwrap();
        prop_assert_eq!(Mask::read_from(&bytes[..]).unwrap(), u);
    }

    #[test]
    fn filter_output_is_a_subset(seq in prop::collection::vec(prop::collection::vec((human_box(), 0.0..1.0f64), 0..4), 0..12)) {
        let frames: Vec<Vec<Detection>> = seq
            .iter()
            .enumerate()
            .map(|(f, dets)| dets.iter().map(|(b, c)| Detection::new(f, *b, *c).unwrap()).collect())
            .collect();
        let cfg = FilterConfig::default();
        let kept = filter_indices(&frames, &cfg);
        prop_assert_eq!(kept.len(), frames.len());
        for (f, idx) in kept.iter().enumerate() {
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(idx.iter().all(|&i| i < frames[f].len() && frames[f][i].confidence >= cfg.min_confidence));
        }
        prop_assert_eq!(filter_indices(&frames, &cfg), kept);
    }
}
