//! Point-set primitives: farthest point sampling, ball query and box membership.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Box3D;

pub type Point3 = [f64; 3];

/// Ordered list of 3D points in meters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().flatten().all(|v| v.is_finite())
    }

    /// Axis-aligned (min, max) corners. `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(mut lo, mut hi), p| {
            for i in 0..3 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
            (lo, hi)
        }))
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud::new(indices.iter().map(|&i| self.points[i]).collect())
    }
}

impl From<Vec<Point3>> for PointCloud {
    fn from(points: Vec<Point3>) -> Self {
        PointCloud::new(points)
    }
}

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

/// Greedy farthest point sampling seeded at index 0. Each step picks the
/// unselected point whose distance to the selected set is largest, lowest
/// index on ties. Asking for `m >= len` returns every index.
pub fn farthest_point_sampling(cloud: &PointCloud, m: usize) -> Result<Vec<usize>> {
    let pts = &cloud.points;
    if pts.is_empty() {
        return Err(Error::EmptyInput("farthest point sampling on an empty cloud"));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let target = m.min(pts.len());
    let mut min_d = vec![f64::INFINITY; pts.len()];
    let mut selected = Vec::with_capacity(target);
    let mut current = 0usize;
    loop {
        selected.push(current);
        min_d[current] = f64::NEG_INFINITY;
        if selected.len() == target {
            break;
        }
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            if min_d[i] == f64::NEG_INFINITY {
                continue;
            }
            let d = dist2(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

/// Indices within `radius` of `center` in index order, truncated to `k_max`.
/// An empty ball falls back to the nearest point repeated `k_max` times.
pub fn ball_query(cloud: &PointCloud, center: Point3, radius: f64, k_max: usize) -> Result<Vec<usize>> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("ball query on an empty cloud"));
    }
    if !(radius > 0.0) || k_max == 0 {
        return Err(Error::InvalidArgument(format!(
            "ball query needs radius > 0 and k_max >= 1 (got {radius}, {k_max})"
        )));
    }
    let r2 = radius * radius;
    let mut out = Vec::with_capacity(k_max);
    let mut nearest = (0usize, f64::INFINITY);
    for (i, p) in cloud.points.iter().enumerate() {
        let d = dist2(p, &center);
        if d <= r2 {
            out.push(i);
            if out.len() == k_max {
                return Ok(out);
            }
        }
        if d < nearest.1 {
            nearest = (i, d);
        }
    }
    if out.is_empty() {
        out = vec![nearest.0; k_max];
    }
    Ok(out)
}

/// Whether `p` lies inside `b` enlarged by `margin` about its center.
#[inline]
pub fn point_in_box(p: &Point3, b: &Box3D, margin: f64) -> bool {
    let [u, v, w] = b.to_local(*p);
    u.abs() <= 0.5 * b.l * margin && v.abs() <= 0.5 * b.w * margin && w.abs() <= 0.5 * b.h * margin
}

/// Indices of the points inside `b` scaled by `margin` (tested in the box frame).
pub fn points_in_box(cloud: &PointCloud, b: &Box3D, margin: f64) -> Vec<usize> {
    let reach = b.bev_radius() * margin;
    let r2 = reach * reach;
    cloud
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let (dx, dy) = (p[0] - b.x, p[1] - b.y);
            dx * dx + dy * dy <= r2 && point_in_box(p, b, margin)
        })
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fps_forced_choice() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [10.0, 0.0, 0.0]]);
        assert_eq!(farthest_point_sampling(&cloud, 2).unwrap(), vec![0, 2]);
        assert_eq!(farthest_point_sampling(&cloud, 3).unwrap(), vec![0, 2, 1]);
        assert_eq!(farthest_point_sampling(&cloud, 10).unwrap().len(), 3);
    }

    #[test]
    fn fps_errors() {
        assert!(matches!(
            farthest_point_sampling(&PointCloud::default(), 3),
            Err(Error::EmptyInput(_))
        ));
        let one = PointCloud::new(vec![[0.0; 3]]);
        assert!(farthest_point_sampling(&one, 0).is_err());
    }

    #[test]
    fn fps_duplicates_exhaust_by_index() {
        let cloud = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0; 3], [1.0, 0.0, 0.0]]);
        assert_eq!(farthest_point_sampling(&cloud, 4).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn ball_query_cases() {
        let cloud = PointCloud::new(vec![[0.5, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(ball_query(&cloud, [0.0; 3], 1.0, 8).unwrap(), vec![0]);

        let dense = PointCloud::new((0..10).map(|i| [0.01 * i as f64, 0.0, 0.0]).collect());
        assert_eq!(ball_query(&dense, [0.0; 3], 1.0, 4).unwrap(), vec![0, 1, 2, 3]);

        let far = PointCloud::new(vec![[5.0, 0.0, 0.0], [3.0, 0.0, 0.0], [4.0, 0.0, 0.0]]);
        assert_eq!(ball_query(&far, [0.0; 3], 1.0, 3).unwrap(), vec![1, 1, 1]);

        assert!(ball_query(&PointCloud::default(), [0.0; 3], 1.0, 3).is_err());
        assert!(ball_query(&far, [0.0; 3], 0.0, 3).is_err());
    }

    #[test]
    fn points_in_box_cases() {
        let b = Box3D::new(1.0, 2.0, 0.0, 4.0, 2.0, 1.5, 0.3);
        let cloud = PointCloud::new(vec![[1.0, 2.0, 0.0], [1.0 + 8.0, 2.0, 0.0]]);
        assert_eq!(points_in_box(&cloud, &b, 1.0), vec![0]);
    }

    #[test]
    fn margin_enlarges_box() {
        let b = Box3D::new(0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0);
        let cloud = PointCloud::new(vec![[1.1, 0.0, 0.0]]);
        assert!(points_in_box(&cloud, &b, 1.0).is_empty());
        assert_eq!(points_in_box(&cloud, &b, 1.2), vec![0]);
    }
}
