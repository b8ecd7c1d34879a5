//! Oriented 3D boxes: corners, exact rotated IoU, residual encoding and NMS.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Intersection areas/volumes below this are treated as empty.
pub const AREA_EPS: f64 = 1e-12;

/// Wrap an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let t = (a + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if t >= PI {
        t - 2.0 * PI
    } else {
        t
    }
}

/// Oriented box with yaw about the vertical axis. `(x, y, z)` is the
/// geometric center; `l` runs along the heading, `w` across it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl Box3D {
    /// Builds a box, wrapping `theta` into `[-π, π)`.
    pub fn new(x: f64, y: f64, z: f64, l: f64, w: f64, h: f64, theta: f64) -> Self {
        Box3D {
            x,
            y,
            z,
            l,
            w,
            h,
            theta: wrap_angle(theta),
        }
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Box3D::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6])
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.x, self.y, self.z, self.l, self.w, self.h, self.theta]
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.l > 0.0 && self.w > 0.0 && self.h > 0.0
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    /// Radius of the footprint's circumscribed circle.
    pub fn bev_radius(&self) -> f64 {
        0.5 * self.l.hypot(self.w)
    }

    pub fn center_distance(&self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Footprint corners, counter-clockwise, starting at the front-left.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.theta.sin_cos();
        let (hl, hw) = (0.5 * self.l, 0.5 * self.w);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| [self.x + c * u - s * v, self.y + s * u + c * v])
    }

    /// Same box with the heading flipped by π if that brings it closer to
    /// `reference_theta`. The occupied volume is unchanged.
    pub fn aligned_heading(&self, reference_theta: f64) -> Box3D {
        let mut out = *self;
        if wrap_angle(self.theta - reference_theta).abs() > PI / 2.0 {
            out.theta = wrap_angle(self.theta + PI);
        }
        out
    }

    /// Maps a world point into the box frame (box center at origin, heading along +x).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.z]
    }

    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.theta.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1], self.z + p[2]]
    }
}

/// The eight corners: bottom face (z − h/2) counter-clockwise, then the top face
/// in the same order.
pub fn box_corners(b: &Box3D) -> [[f64; 3]; 8] {
    let bev = b.bev_corners();
    let (lo, hi) = (b.z - 0.5 * b.h, b.z + 0.5 * b.h);
    let mut out = [[0.0; 3]; 8];
    for (i, [x, y]) in bev.iter().enumerate() {
        out[i] = [*x, *y, lo];
        out[i + 4] = [*x, *y, hi];
    }
    out
}

/// Signed shoelace area; positive for counter-clockwise polygons.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland–Hodgman: clips `subject` against the convex counter-clockwise `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let (e0, e1) = (clip[i], clip[(i + 1) % n]);
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let d_cur = cross(e0, e1, cur);
            let d_prev = cross(e0, e1, prev);
            if d_cur >= 0.0 {
                if d_prev < 0.0 {
                    output.push(segment_cut(prev, cur, d_prev, d_cur));
                }
                output.push(cur);
            } else if d_prev >= 0.0 {
                output.push(segment_cut(prev, cur, d_prev, d_cur));
            }
        }
    }
    output
}

fn segment_cut(a: [f64; 2], b: [f64; 2], da: f64, db: f64) -> [f64; 2] {
    let t = da / (da - db);
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

/// Exact intersection area of two box footprints.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let reach = a.bev_radius() + b.bev_radius();
    if (a.x - b.x).powi(2) + (a.y - b.y).powi(2) >= reach * reach {
        return 0.0;
    }
    let poly = clip_convex(&a.bev_corners(), &b.bev_corners());
    let area = polygon_area(&poly);
    if area < AREA_EPS {
        0.0
    } else {
        area.min(a.bev_area()).min(b.bev_area())
    }
}

/// Bird's-eye-view IoU of the rotated footprints.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.bev_area() + b.bev_area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn vertical_overlap(a: &Box3D, b: &Box3D) -> f64 {
    let lo = (a.z - 0.5 * a.h).max(b.z - 0.5 * b.h);
    let hi = (a.z + 0.5 * a.h).min(b.z + 0.5 * b.h);
    (hi - lo).max(0.0)
}

/// Volumetric IoU of two yaw-rotated boxes.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let dz = vertical_overlap(a, b);
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    if inter < AREA_EPS {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Encoded residuals of a box relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegressionTarget {
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub tw: f64,
    pub tl: f64,
    pub th: f64,
    pub ttheta: f64,
}

impl RegressionTarget {
    pub fn to_array(&self) -> [f64; 7] {
        [self.tx, self.ty, self.tz, self.tw, self.tl, self.th, self.ttheta]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        RegressionTarget {
            tx: a[0],
            ty: a[1],
            tz: a[2],
            tw: a[3],
            tl: a[4],
            th: a[5],
            ttheta: a[6],
        }
    }
}

/// Residuals of `gt` against `anchor`: planar offsets scaled by the anchor's
/// bottom diagonal, vertical offset by its height, log size ratios and the
/// wrapped yaw difference.
pub fn encode_box(gt: &Box3D, anchor: &Box3D) -> RegressionTarget {
    let diag = anchor.l.hypot(anchor.w);
    RegressionTarget {
        tx: (gt.x - anchor.x) / diag,
        ty: (gt.y - anchor.y) / diag,
        tz: (gt.z - anchor.z) / anchor.h,
        tw: (gt.w / anchor.w).ln(),
        tl: (gt.l / anchor.l).ln(),
        th: (gt.h / anchor.h).ln(),
        ttheta: wrap_angle(gt.theta - anchor.theta),
    }
}

/// Inverse of [`encode_box`].
pub fn decode_box(t: &RegressionTarget, anchor: &Box3D) -> Box3D {
    let diag = anchor.l.hypot(anchor.w);
    Box3D::new(
        anchor.x + t.tx * diag,
        anchor.y + t.ty * diag,
        anchor.z + t.tz * anchor.h,
        anchor.l * t.tl.exp(),
        anchor.w * t.tw.exp(),
        anchor.h * t.th.exp(),
        anchor.theta + t.ttheta,
    )
}

/// Greedy non-maximum suppression on BEV IoU. Returns kept indices in
/// descending score order (ties broken by lower index). A box is dropped
/// when its IoU with an already kept box exceeds `iou_threshold`.
pub fn nms(boxes: &[Box3D], scores: &[f64], iou_threshold: f64, max_keep: usize) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "boxes and scores must align");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for idx in order {
        if keep.len() >= max_keep {
            break;
        }
        let suppressed = keep
            .iter()
            .any(|&k| bev_iou(&boxes[k], &boxes[idx]) > iou_threshold);
        if !suppressed {
            keep.push(idx);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Box3D {
        Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0)
    }

    fn sorted(mut c: Vec<[f64; 3]>) -> Vec<[f64; 3]> {
        for p in c.iter_mut() {
            for v in p.iter_mut() {
                *v = (*v * 1e9).round() / 1e9;
            }
        }
        c.sort_by(|a, b| a.partial_cmp(b).unwrap());
        c
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), -PI);
        assert_eq!(wrap_angle(-PI), -PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        for k in -20..20 {
            let t = wrap_angle(k as f64 * 0.7 - 1e-17);
            assert!((-PI..PI).contains(&t));
        }
    }

    #[test]
    fn unit_cube_corners() {
        let c = box_corners(&unit());
        for p in c {
            for v in p {
                assert!((v.abs() - 0.5).abs() < 1e-12);
            }
        }
        let rotated = box_corners(&Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, PI / 2.0));
        assert_eq!(sorted(c.to_vec()), sorted(rotated.to_vec()));
    }

    #[test]
    fn corners_match_rotation_matrix() {
        let b = Box3D::new(0.0, 0.0, 0.0, 2.0, 1.0, 1.0, PI / 4.0);
        let (s, c) = (PI / 4.0).sin_cos();
        let mut expected = Vec::new();
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    let (u, v) = (sx * 1.0, sy * 0.5);
                    expected.push([c * u - s * v, s * u + c * v, sz * 0.5]);
                }
            }
        }
        assert_eq!(sorted(box_corners(&b).to_vec()), sorted(expected));
    }

    #[test]
    fn iou_basic_cases() {
        assert!((bev_iou(&unit(), &unit()) - 1.0).abs() < 1e-12);
        assert!((iou3d(&unit(), &unit()) - 1.0).abs() < 1e-12);
        let a = Box3D::new(0.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0);
        let b = Box3D::new(1.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0);
        assert!((bev_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        let lifted = Box3D { z: 1.0, ..a };
        assert_eq!(iou3d(&a, &lifted), 0.0);
        let far = Box3D { x: 10.0, ..a };
        assert_eq!(bev_iou(&a, &far), 0.0);
    }

    #[test]
    fn rotated_square_iou_closed_form() {
        // unit square vs the same square at 45°: the intersection is a regular
        // octagon of area 2(√2 − 1)
        let a = unit();
        let b = Box3D { theta: PI / 4.0, ..a };
        let inter = 2.0 * (2f64.sqrt() - 1.0);
        let expected = inter / (2.0 - inter);
        assert!((bev_iou(&a, &b) - expected).abs() < 1e-12);
    }

    #[test]
    fn encode_examples() {
        let anchor = Box3D::new(0.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0);
        assert_eq!(encode_box(&anchor, &anchor), RegressionTarget::default());
        let shifted = Box3D { x: 1.0, ..anchor };
        let t = encode_box(&shifted, &anchor);
        assert!((t.tx - 1.0 / 20f64.sqrt()).abs() < 1e-12);
        assert_eq!([t.ty, t.tz, t.tw, t.tl, t.th, t.ttheta], [0.0; 6]);
        let longer = Box3D { l: 8.0, ..anchor };
        assert!((encode_box(&longer, &anchor).tl - 2f64.ln()).abs() < 1e-12);

        let back = decode_box(&t, &anchor);
        assert!((back.x - 1.0).abs() < 1e-12);
        assert_eq!(decode_box(&RegressionTarget::default(), &anchor), anchor);
    }

    #[test]
    fn encode_wraps_yaw() {
        let anchor = Box3D::new(0.0, 0.0, 0.0, 4.0, 2.0, 1.5, 3.0);
        let gt = Box3D { theta: -3.0, ..anchor };
        let t = encode_box(&gt, &anchor);
        assert!((t.ttheta - (2.0 * PI - 6.0)).abs() < 1e-12);
    }

    #[test]
    fn aligned_heading_flips_only_when_closer() {
        let b = Box3D::new(0.0, 0.0, 0.0, 4.0, 2.0, 1.5, 3.0);
        assert!((b.aligned_heading(0.0).theta - (3.0 - PI)).abs() < 1e-12);
        assert_eq!(b.aligned_heading(2.5).theta, b.theta);
    }

    #[test]
    fn nms_simple_cases() {
        assert!(nms(&[], &[], 0.5, 10).is_empty());
        assert_eq!(nms(&[unit()], &[0.3], 0.5, 10), vec![0]);
        let spread: Vec<Box3D> = (0..5).map(|i| Box3D { x: 3.0 * i as f64, ..unit() }).collect();
        let scores = [0.1, 0.5, 0.3, 0.9, 0.2];
        assert_eq!(nms(&spread, &scores, 0.1, 3), vec![3, 1, 2]);
        let overlapping = [unit(), Box3D { x: 0.1, ..unit() }];
        assert_eq!(nms(&overlapping, &[0.4, 0.8], 0.5, 10), vec![1]);
    }

    #[test]
    fn local_frame_roundtrip() {
        let b = Box3D::new(1.0, -2.0, 0.5, 4.0, 2.0, 1.5, 0.7);
        let p = [3.0, 1.0, -0.2];
        let q = b.to_world(b.to_local(p));
        for i in 0..3 {
            assert!((p[i] - q[i]).abs() < 1e-12);
        }
    }
}
