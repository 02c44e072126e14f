use proptest::prelude::*;
use veye_core::c2f::make_refine_labels;
use veye_core::codec::{
    quat_from_euler_xyz_deg, rotation_bin, rotation_bin_center, wrap_deg, ActionCodec, ActionVector, PolicyOutputs, DEFAULT_HEATMAP_SIGMA,
};
use veye_core::geometry::{PointCloud, Vec3};
use veye_core::keypoint::keypoints_from_signals;
use veye_core::render::{render, zoom_spec, VirtualCameraSpec};

fn spec_strategy() -> impl Strategy<Value = VirtualCameraSpec> {
    (-89.0..89.0f64, -180.0..180.0f64, 0.5..3.0f64, 0.05..1.0f64)
        .prop_map(|(e, a, d, h)| VirtualCameraSpec::new(e, a, d, Vec3::new(0.0, 0.0, 0.3), h, 64).unwrap())
}

proptest! {
    #[test]
    fn wrapped_angles_stay_in_range(a in -1e4..1e4f64) {
        let w = wrap_deg(a);
        prop_assert!((-180.0..180.0).contains(&w));
        prop_assert!(((a - w) / 360.0 - ((a - w) / 360.0).round()).abs() < 1e-9);
    }

    #[test]
    fn rotation_bins_are_within_half_a_bin(a in -180.0..180.0f64) {
        let c = rotation_bin_center(rotation_bin(a));
        prop_assert!(wrap_deg(c - a).abs() <= 2.5 + 1e-9);
    }

    #[test]
    fn keypoints_are_sorted_spaced_and_end_at_last(
        g in prop::collection::vec(any::<bool>(), 2..60),
        seed in any::<u64>(),
        gap in 1usize..5,
    ) {
        let v: Vec<f64> = (0..g.len()).map(|i| if (seed >> (i % 64)) & 1 == 1 { 0.0 } else { 1.0 }).collect();
        let k = keypoints_from_signals(&g, &v, 1e-3, gap).unwrap();
        prop_assert_eq!(*k.last().unwrap(), g.len() - 1);
        prop_assert!(k.windows(2).all(|w| w[0] < w[1]));
        // Only the final step may sit closer than the gap to its neighbor.
        prop_assert!(k[..k.len() - 1].windows(2).all(|w| w[1] - w[0] >= gap));
    }

    #[test]
    fn zoom_keeps_center_and_direction(spec in spec_strategy(), f in 1.01..16.0f64, x in -0.3..0.3f64, y in -0.3..0.3f64) {
        let c = Vec3::new(x, y, 0.2);
        let z = zoom_spec(&spec, &c, f).unwrap();
        let (u, v, _) = z.world_to_pixel(&c);
        prop_assert!((u - 32.0).abs() < 1e-9 && (v - 32.0).abs() < 1e-9);
        prop_assert_eq!((z.elev, z.azim, z.distance), (spec.elev, spec.azim, spec.distance));
        prop_assert!((spec.half_extent / z.half_extent - f).abs() < 1e-9);
    }

    #[test]
    fn rendering_ignores_point_order(spec in spec_strategy(), pts in prop::collection::vec((-0.5..0.5f64, -0.5..0.5f64, -0.2..0.8f64, 0u8..4), 1..80)) {
        let cloud = PointCloud { points: pts.iter().map(|p| Vec3::new(p.0, p.1, p.2)).collect(), colors: pts.iter().map(|p| [p.3 * 60, 0, 255 - p.3]).collect() };
        let rev = PointCloud { points: cloud.points.iter().rev().cloned().collect(), colors: cloud.colors.iter().rev().cloned().collect() };
        prop_assert_eq!(render(&cloud, &spec), render(&rev, &spec));
    }

    #[test]
    fn decoded_bin_centers_get_negative_refine_labels(px in 0usize..224, py in 0usize..224, bin in 0usize..36) {
        let spec = VirtualCameraSpec::new(90.0, 0.0, 1.95, Vec3::new(0.0, 0.0, 0.39), 0.5, 224).unwrap();
        let codec = ActionCodec::new(DEFAULT_HEATMAP_SIGMA, 1.625, 0.5).unwrap();
        let (lo, hi) = codec.depth_range(&spec);
        let p = spec.pixel_to_world(px as f64 + 0.5, py as f64 + 0.5, lo + (bin as f64 + 0.5) * (hi - lo) / 36.0).unwrap();
        let a = ActionVector::new(p, quat_from_euler_xyz_deg([0.0, 0.0, 90.0]), true, false);
        prop_assert_eq!(make_refine_labels(&[a], &spec, 4.0, &codec).unwrap(), vec![Some(false)]);
        let t = codec.encode(&a, &spec, false).unwrap();
        prop_assert!((codec.decode(&PolicyOutputs::from_target(&t, 1.0), &spec).position - p).norm() < 1e-9);
    }
}

#[test]
fn refine_labels_reject_non_magnifying_zoom_and_skip_out_of_view() {
    let spec = VirtualCameraSpec::new(90.0, 0.0, 1.95, Vec3::new(0.0, 0.0, 0.39), 0.5, 224).unwrap();
    let codec = ActionCodec::new(DEFAULT_HEATMAP_SIGMA, 1.625, 0.5).unwrap();
    let a = ActionVector::new(Vec3::new(0.013, -0.021, 0.1), quat_from_euler_xyz_deg([0.0, 0.0, 0.0]), true, false);
    assert!(make_refine_labels(&[a], &spec, 1.0, &codec).is_err());
    let far = ActionVector { position: Vec3::new(3.0, 0.0, 0.1), ..a };
    assert_eq!(make_refine_labels(&[far], &spec, 4.0, &codec).unwrap(), vec![None]);
}
