use std::f64::consts::PI;

use proptest::prelude::*;

use ifg_core::check::{bev_iou_oracle, nms_brute_force};
use ifg_core::geom::{bev_iou, decode_box, encode_box, iou3d, nms, wrap_angle, Box3D};
use ifg_core::pointops::{ball_query, farthest_point_sampling, points_in_box, PointCloud};
use ifg_core::templates::{adjust_template, generate_template};
use ifg_core::ObjectClass;

fn arb_box() -> impl Strategy<Value = Box3D> {
    (
        -3.0..3.0f64,
        -3.0..3.0f64,
        -1.0..1.0f64,
        0.3..5.0f64,
        0.3..2.5f64,
        0.3..2.5f64,
        -PI..PI,
    )
        .prop_map(|(x, y, z, l, w, h, t)| Box3D::new(x, y, z, l, w, h, t))
}

fn rigid(b: &Box3D, dx: f64, dy: f64, dz: f64, yaw: f64) -> Box3D {
    let (s, c) = yaw.sin_cos();
    Box3D::new(
        c * b.x - s * b.y + dx,
        s * b.x + c * b.y + dy,
        b.z + dz,
        b.l,
        b.w,
        b.h,
        b.theta + yaw,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let (ab, ba) = (bev_iou(&a, &b), bev_iou(&b, &a));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        let (ab3, ba3) = (iou3d(&a, &b), iou3d(&b, &a));
        prop_assert!((ab3 - ba3).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab3));
    }

    #[test]
    fn iou_is_rigid_invariant(a in arb_box(), b in arb_box(), dx in -50.0..50.0f64, dy in -50.0..50.0f64, dz in -2.0..2.0f64, yaw in -PI..PI) {
        let (ra, rb) = (rigid(&a, dx, dy, dz, yaw), rigid(&b, dx, dy, dz, yaw));
        prop_assert!((bev_iou(&a, &b) - bev_iou(&ra, &rb)).abs() < 1e-9);
        prop_assert!((iou3d(&a, &b) - iou3d(&ra, &rb)).abs() < 1e-9);
    }

    #[test]
    fn self_iou_is_one(a in arb_box()) {
        prop_assert!((bev_iou(&a, &a) - 1.0).abs() < 1e-9);
        prop_assert!((iou3d(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn encode_decode_roundtrip(gt in arb_box(), anchor in arb_box()) {
        let back = decode_box(&encode_box(&gt, &anchor), &anchor);
        prop_assert!((back.x - gt.x).abs() < 1e-9);
        prop_assert!((back.y - gt.y).abs() < 1e-9);
        prop_assert!((back.z - gt.z).abs() < 1e-9);
        prop_assert!((back.l - gt.l).abs() < 1e-9);
        prop_assert!((back.w - gt.w).abs() < 1e-9);
        prop_assert!((back.h - gt.h).abs() < 1e-9);
        prop_assert!(wrap_angle(back.theta - gt.theta).abs() < 1e-9);
    }

    #[test]
    fn nms_keeps_order_and_suppresses_only_overlaps(
        boxes in prop::collection::vec(arb_box(), 0..24),
        seed_scores in prop::collection::vec(0u8..8, 24),
        thr in 0.05..0.9f64,
    ) {
        let scores: Vec<f64> = boxes.iter().zip(&seed_scores).map(|(_, s)| *s as f64 / 8.0).collect();
        let keep = nms(&boxes, &scores, thr, usize::MAX);
        for w in keep.windows(2) {
            prop_assert!(scores[w[0]] >= scores[w[1]]);
        }
        for i in 0..boxes.len() {
            if keep.contains(&i) {
                continue;
            }
            let covered = keep.iter().any(|&k| bev_iou(&boxes[k], &boxes[i]) > thr);
            prop_assert!(covered, "box {} dropped without an overlapping keeper", i);
        }
        prop_assert_eq!(keep, nms_brute_force(&boxes, &scores, thr, usize::MAX));
    }

    #[test]
    fn ball_query_respects_radius(pts in prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64), 1..60), r in 0.1..2.0f64) {
        let cloud = PointCloud::new(pts.iter().map(|&(x, y, z)| [x, y, z]).collect());
        let center = [0.0, 0.0, 0.0];
        let idx = ball_query(&cloud, center, r, 16).unwrap();
        prop_assert!(!idx.is_empty() && idx.len() <= 16);
        let any_inside = cloud.points.iter().any(|p| p.iter().map(|v| v * v).sum::<f64>() <= r * r);
        if any_inside {
            for &i in &idx {
                let p = cloud.points[i];
                prop_assert!(p.iter().map(|v| v * v).sum::<f64>() <= r * r + 1e-12);
            }
        }
    }

    #[test]
    fn fps_selects_every_point_when_m_is_full(pts in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64), 1..40), rot in 0usize..40) {
        let points: Vec<[f64; 3]> = pts.iter().map(|&(x, y, z)| [x, y, z]).collect();
        let mut permuted = points.clone();
        let k = rot % points.len();
        permuted.rotate_left(k);
        let a = farthest_point_sampling(&PointCloud::new(points.clone()), points.len()).unwrap();
        let b = farthest_point_sampling(&PointCloud::new(permuted.clone()), permuted.len()).unwrap();
        let mut sa: Vec<_> = a.iter().map(|&i| points[i].map(f64::to_bits)).collect();
        let mut sb: Vec<_> = b.iter().map(|&i| permuted[i].map(f64::to_bits)).collect();
        sa.sort();
        sb.sort();
        prop_assert_eq!(sa, sb);
    }

    #[test]
    fn adjusted_template_fills_box(l in 0.5..5.0f64, w in 0.4..2.5f64, h in 0.5..2.5f64, x in -20.0..20.0f64, y in -20.0..20.0f64, t in -PI..PI) {
        let tpl = generate_template(ObjectClass::Car, 256, 3).unwrap();
        let gt = Box3D::new(x, y, 0.2, l, w, h, t);
        let cloud = adjust_template(&tpl, &gt);
        let local: Vec<[f64; 3]> = cloud.points.iter().map(|p| gt.to_local(*p)).collect();
        for axis in 0..3 {
            let lo = local.iter().map(|p| p[axis]).fold(f64::INFINITY, f64::min);
            let hi = local.iter().map(|p| p[axis]).fold(f64::NEG_INFINITY, f64::max);
            let ext = [l, w, h][axis];
            prop_assert!((hi - lo - ext).abs() < 1e-6);
            prop_assert!((hi + lo).abs() < 1e-6);
        }
        // Dividing out the size recovers the canonical points.
        let dims = tpl.canonical_dims;
        for (p, q) in local.iter().zip(&tpl.points.points) {
            for axis in 0..3 {
                let s = [l, w, h][axis] / dims[axis];
                prop_assert!((p[axis] / s - q[axis]).abs() < 1e-6);
            }
        }
        prop_assert_eq!(points_in_box(&cloud, &gt, 1.0 + 1e-6).len(), cloud.len());
    }
}

#[test]
fn exact_bev_iou_matches_grid_oracle() {
    let a = Box3D::new(0.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.3);
    let b = Box3D::new(1.0, 0.5, 0.2, 3.0, 1.5, 1.5, -0.4);
    assert!((bev_iou(&a, &b) - bev_iou_oracle(&a, &b, 400)).abs() < 0.01);
}

#[test]
fn points_inside_two_boxes_pass_both_tests() {
    let a = Box3D::new(0.0, 0.0, 0.0, 4.0, 2.0, 2.0, 0.2);
    let b = Box3D::new(0.5, 0.0, 0.0, 4.0, 2.0, 2.0, -0.1);
    let cloud = PointCloud::new(vec![[0.2, 0.1, 0.0], [0.8, -0.3, 0.4], [-0.5, 0.2, -0.3]]);
    assert!(iou3d(&a, &b) > 0.0);
    assert_eq!(points_in_box(&cloud, &a, 1.0).len(), 3);
    assert_eq!(points_in_box(&cloud, &b, 1.0).len(), 3);
}

#[test]
fn car_template_has_no_empty_octant() {
    let t = generate_template(ObjectClass::Car, 1024, 0).unwrap();
    let mut counts = [0usize; 8];
    for p in &t.points.points {
        let o = (p[0] > 0.0) as usize | ((p[1] > 0.0) as usize) << 1 | ((p[2] > 0.0) as usize) << 2;
        counts[o] += 1;
    }
    assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
}
