//! Procedural per-class point templates and their box-driven adjustment.
//!
//! Each class is modelled as a union of simple primitives (slabs, cylinders,
//! capsules, an ellipsoid, tori). Points are drawn uniformly over the union's
//! surface and then rescaled so the template extents match the class's
//! canonical dimensions exactly.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::class::ObjectClass;
use crate::error::{Error, Result};
use crate::geom::Box3D;
use crate::pointops::{Point3, PointCloud};

/// Default number of points per template.
pub const DEFAULT_TEMPLATE_POINTS: usize = 1024;

pub const MIN_TEMPLATE_POINTS: usize = 64;

/// Canonical point set for one class: centered at the origin, heading along +x.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub class: ObjectClass,
    pub points: PointCloud,
    /// (L′, W′, H′)
    pub canonical_dims: [f64; 3],
}

/// Surface primitive used to assemble a template.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Cuboid { center: Point3, half: Point3 },
    /// Closed cylinder between two axis endpoints.
    Cylinder { p0: Point3, p1: Point3, radius: f64 },
    Capsule { p0: Point3, p1: Point3, radius: f64 },
    Ellipsoid { center: Point3, radii: Point3 },
    /// Torus whose symmetry axis is parallel to y (a wheel in the xz plane).
    Torus { center: Point3, major: f64, minor: f64 },
}

fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add_scaled(a: Point3, d: Point3, s: f64) -> Point3 {
    [a[0] + s * d[0], a[1] + s * d[1], a[2] + s * d[2]]
}

fn norm(a: Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Point3, b: Point3) -> Point3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Unit axis plus two unit vectors spanning the orthogonal plane.
fn frame(p0: Point3, p1: Point3) -> (Point3, Point3, Point3, f64) {
    let d = sub(p1, p0);
    let len = norm(d);
    let axis = [d[0] / len, d[1] / len, d[2] / len];
    let helper = if axis[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = cross(axis, helper);
    let un = norm(u);
    let u = [u[0] / un, u[1] / un, u[2] / un];
    let v = cross(axis, u);
    (axis, u, v, len)
}

fn unit_sphere<R: Rng>(rng: &mut R) -> Point3 {
    loop {
        let g: Point3 = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = norm(g);
        if n > 1e-12 {
            return [g[0] / n, g[1] / n, g[2] / n];
        }
    }
}

impl Primitive {
    pub fn surface_area(&self) -> f64 {
        match *self {
            Primitive::Cuboid { half, .. } => {
                let [a, b, c] = half.map(|h| 2.0 * h);
                2.0 * (a * b + b * c + c * a)
            }
            Primitive::Cylinder { p0, p1, radius } => {
                2.0 * PI * radius * norm(sub(p1, p0)) + 2.0 * PI * radius * radius
            }
            Primitive::Capsule { p0, p1, radius } => {
                2.0 * PI * radius * norm(sub(p1, p0)) + 4.0 * PI * radius * radius
            }
            Primitive::Ellipsoid { radii: [a, b, c], .. } => {
                // Knud Thomsen's approximation, relative error < 1.1%
                let p = 1.6075;
                let m = ((a * b).powf(p) + (a * c).powf(p) + (b * c).powf(p)) / 3.0;
                4.0 * PI * m.powf(1.0 / p)
            }
            Primitive::Torus { major, minor, .. } => 4.0 * PI * PI * major * minor,
        }
    }

    /// One point drawn uniformly from the surface.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Point3 {
        match *self {
            Primitive::Cuboid { center, half } => {
                let [a, b, c] = half;
                let faces = [b * c, b * c, a * c, a * c, a * b, a * b];
                let total: f64 = faces.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut face = 5;
                for (i, area) in faces.iter().enumerate() {
                    if pick < *area {
                        face = i;
                        break;
                    }
                    pick -= area;
                }
                let mut p = [
                    (2.0 * rng.random::<f64>() - 1.0) * a,
                    (2.0 * rng.random::<f64>() - 1.0) * b,
                    (2.0 * rng.random::<f64>() - 1.0) * c,
                ];
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                p[face / 2] = sign * half[face / 2];
                [center[0] + p[0], center[1] + p[1], center[2] + p[2]]
            }
            Primitive::Cylinder { p0, p1, radius } => {
                let (axis, u, v, len) = frame(p0, p1);
                let side = 2.0 * PI * radius * len;
                let cap = PI * radius * radius;
                let pick = rng.random::<f64>() * (side + 2.0 * cap);
                let phi = 2.0 * PI * rng.random::<f64>();
                let (s, c) = phi.sin_cos();
                let (t, r) = if pick < side {
                    (rng.random::<f64>() * len, radius)
                } else {
                    let t = if pick < side + cap { 0.0 } else { len };
                    (t, radius * rng.random::<f64>().sqrt())
                };
                let base = add_scaled(p0, axis, t);
                add_scaled(add_scaled(base, u, r * c), v, r * s)
            }
            Primitive::Capsule { p0, p1, radius } => {
                let (axis, u, v, len) = frame(p0, p1);
                let side = 2.0 * PI * radius * len;
                let caps = 4.0 * PI * radius * radius;
                if rng.random::<f64>() * (side + caps) < side {
                    let phi = 2.0 * PI * rng.random::<f64>();
                    let (s, c) = phi.sin_cos();
                    let base = add_scaled(p0, axis, rng.random::<f64>() * len);
                    add_scaled(add_scaled(base, u, radius * c), v, radius * s)
                } else {
                    let d = unit_sphere(rng);
                    let end = if dot(d, axis) >= 0.0 { p1 } else { p0 };
                    add_scaled(end, d, radius)
                }
            }
            Primitive::Ellipsoid { center, radii: [a, b, c] } => {
                // rejection on the area element of the mapped unit sphere
                let bound = (a * b).max(a * c).max(b * c);
                loop {
                    let d = unit_sphere(rng);
                    let element = ((b * c * d[0]).powi(2) + (a * c * d[1]).powi(2) + (a * b * d[2]).powi(2)).sqrt();
                    if rng.random::<f64>() * bound <= element {
                        return [center[0] + a * d[0], center[1] + b * d[1], center[2] + c * d[2]];
                    }
                }
            }
            Primitive::Torus { center, major, minor } => loop {
                let u = 2.0 * PI * rng.random::<f64>();
                let v = 2.0 * PI * rng.random::<f64>();
                if rng.random::<f64>() * (major + minor) <= major + minor * v.cos() {
                    let ring = major + minor * v.cos();
                    return [
                        center[0] + ring * u.cos(),
                        center[1] + minor * v.sin(),
                        center[2] + ring * u.sin(),
                    ];
                }
            },
        }
    }

    /// Solid containment with the radii/half extents inflated by `1 + tol`.
    pub fn contains(&self, p: Point3, tol: f64) -> bool {
        let k = 1.0 + tol;
        match *self {
            Primitive::Cuboid { center, half } => (0..3).all(|i| (p[i] - center[i]).abs() <= half[i] * k),
            Primitive::Cylinder { p0, p1, radius } | Primitive::Capsule { p0, p1, radius } => {
                let (axis, _, _, len) = frame(p0, p1);
                let rel = sub(p, p0);
                let t = dot(rel, axis);
                let capsule = matches!(self, Primitive::Capsule { .. });
                let slack = if capsule { radius * k } else { radius * tol };
                if t < -slack || t > len + slack {
                    return false;
                }
                let clamped = t.clamp(0.0, len);
                let radial = norm(sub(rel, [axis[0] * clamped, axis[1] * clamped, axis[2] * clamped]));
                if capsule {
                    radial <= radius * k
                } else {
                    norm(sub(rel, [axis[0] * t, axis[1] * t, axis[2] * t])) <= radius * k
                }
            }
            Primitive::Ellipsoid { center, radii } => {
                let q: f64 = (0..3).map(|i| ((p[i] - center[i]) / (radii[i] * k)).powi(2)).sum();
                q <= 1.0
            }
            Primitive::Torus { center, major, minor } => {
                let d = sub(p, center);
                let ring = (d[0] * d[0] + d[2] * d[2]).sqrt() - major;
                (ring * ring + d[1] * d[1]).sqrt() <= minor * k
            }
        }
    }
}

/// Primitive layout for a class, in canonical coordinates whose union spans
/// exactly the class's canonical box.
pub fn class_primitives(class: ObjectClass) -> Vec<Primitive> {
    use Primitive::*;
    let [l, w, h] = class.canonical_dims();
    let (hl, hw, hh) = (0.5 * l, 0.5 * w, 0.5 * h);
    match class {
        ObjectClass::Car => {
            let (r, tread) = (0.36, 0.24);
            let wz = -hh + r;
            let mut prims = vec![Cuboid {
                center: [0.0, 0.0, 0.5 * (-0.55 + hh)],
                half: [hl, hw, 0.5 * (hh + 0.55)],
            }];
            for wx in [-1.25, 1.25] {
                for side in [-1.0, 1.0] {
                    prims.push(Cylinder {
                        p0: [wx, side * (hw - tread), wz],
                        p1: [wx, side * hw, wz],
                        radius: r,
                    });
                }
            }
            prims
        }
        ObjectClass::Pedestrian => vec![
            Ellipsoid { center: [0.0, 0.0, hh - 0.12], radii: [0.10, 0.09, 0.12] },
            Capsule { p0: [0.0, 0.0, 0.0], p1: [0.0, 0.0, 0.45], radius: 0.16 },
            Capsule { p0: [0.0, 0.1, -0.05], p1: [hl - 0.05, 0.1, -hh + 0.05], radius: 0.05 },
            Capsule { p0: [0.0, -0.1, -0.05], p1: [-hl + 0.05, -0.1, -hh + 0.05], radius: 0.05 },
            Capsule { p0: [0.0, hw - 0.05, 0.42], p1: [-0.30, hw - 0.05, 0.0], radius: 0.05 },
            Capsule { p0: [0.0, -hw + 0.05, 0.42], p1: [0.30, -hw + 0.05, 0.0], radius: 0.05 },
        ],
        ObjectClass::Cyclist => {
            let (major, minor) = (0.33, 0.03);
            let wx = hl - major - minor;
            let wz = -hh + major + minor;
            vec![
                Torus { center: [-wx, 0.0, wz], major, minor },
                Torus { center: [wx, 0.0, wz], major, minor },
                Capsule { p0: [-wx, 0.0, wz], p1: [0.1, 0.0, -0.1], radius: 0.025 },
                Capsule { p0: [wx, 0.0, wz], p1: [0.45, 0.0, 0.0], radius: 0.025 },
                Capsule { p0: [-0.1, 0.0, -0.05], p1: [0.45, 0.0, 0.0], radius: 0.025 },
                Capsule { p0: [-0.15, 0.0, 0.0], p1: [0.15, 0.0, 0.5], radius: 0.14 },
                Ellipsoid { center: [0.2, 0.0, hh - 0.11], radii: [0.10, 0.09, 0.11] },
                Capsule { p0: [0.45, -hw + 0.03, 0.05], p1: [0.45, hw - 0.03, 0.05], radius: 0.03 },
                Capsule { p0: [0.12, 0.18, 0.45], p1: [0.45, 0.22, 0.07], radius: 0.045 },
                Capsule { p0: [0.12, -0.18, 0.45], p1: [0.45, -0.22, 0.07], radius: 0.045 },
                Capsule { p0: [-0.1, 0.12, 0.0], p1: [0.05, 0.12, -0.5], radius: 0.06 },
                Capsule { p0: [-0.1, -0.12, 0.0], p1: [0.05, -0.12, -0.5], radius: 0.06 },
            ]
        }
    }
}

/// Splits `k` across weights by largest remainder, so every share is within
/// one point of its exact proportion.
fn apportion(weights: &[f64], k: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * k as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = k - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Samples a `k`-point template for `class`, deterministic in `seed`.
pub fn generate_template(class: ObjectClass, k: usize, seed: u64) -> Result<Template> {
    if k < MIN_TEMPLATE_POINTS {
        return Err(Error::InvalidArgument(format!(
            "templates need at least {MIN_TEMPLATE_POINTS} points, got {k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x7e3a_0000_u64 + class.id() as u64));
    let prims = class_primitives(class);
    let areas: Vec<f64> = prims.iter().map(Primitive::surface_area).collect();
    let counts = apportion(&areas, k);
    let mut points = Vec::with_capacity(k);
    for (prim, n) in prims.iter().zip(counts) {
        for _ in 0..n {
            points.push(prim.sample(&mut rng));
        }
    }
    points.shuffle(&mut rng);

    let dims = class.canonical_dims();
    let mut cloud = PointCloud::new(points);
    let (lo, hi) = cloud.bounds().expect("k >= 64");
    let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];
    let scale = [dims[0] / (hi[0] - lo[0]), dims[1] / (hi[1] - lo[1]), dims[2] / (hi[2] - lo[2])];
    for p in cloud.points.iter_mut() {
        for i in 0..3 {
            p[i] = (p[i] - center[i]) * scale[i];
        }
    }
    Ok(Template {
        class,
        points: cloud,
        canonical_dims: dims,
    })
}

/// Fits a template to a box: per-axis scaling by (L/L′, W/W′, H/H′), then
/// rotation by the box yaw and translation to the box center.
pub fn adjust_template(t: &Template, gt: &Box3D) -> PointCloud {
    let [cl, cw, ch] = t.canonical_dims;
    let s = [gt.l / cl, gt.w / cw, gt.h / ch];
    PointCloud::new(
        t.points
            .points
            .iter()
            .map(|p| gt.to_world([p[0] * s[0], p[1] * s[1], p[2] * s[2]]))
            .collect(),
    )
}

/// ASCII PLY text for a template. Coordinates are stored as float32.
pub fn template_to_ply(t: &Template) -> String {
    let mut out = String::new();
    let [l, w, h] = t.canonical_dims;
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "comment class {}", t.class.id());
    let _ = writeln!(out, "comment dims {l} {w} {h}");
    let _ = writeln!(out, "element vertex {}", t.points.len());
    out.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in &t.points.points {
        let _ = writeln!(out, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32);
    }
    out
}

pub fn parse_template_ply(text: &str) -> Result<Template> {
    let err = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut expect = |want: &str| -> Result<()> {
        match lines.next() {
            Some((_, l)) if l == want => Ok(()),
            Some((n, l)) => Err(err(n, &format!("expected `{want}`, found `{l}`"))),
            None => Err(err(0, &format!("missing `{want}`"))),
        }
    };
    expect("ply")?;
    expect("format ascii 1.0")?;

    let mut class = None;
    let mut dims = None;
    let mut count = None;
    let mut props = Vec::new();
    let mut last_line = 2;
    loop {
        let Some((n, line)) = lines.next() else {
            return Err(err(last_line + 1, "header ended without `end_header`"));
        };
        last_line = n;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["end_header"] => break,
            ["comment", "class", id] => {
                let id: u8 = id.parse().map_err(|_| err(n, "class id is not an integer"))?;
                class = Some(ObjectClass::from_id(id).ok_or_else(|| err(n, "class id out of range"))?);
            }
            ["comment", "dims", l, w, h] => {
                let parse = |s: &str| s.parse::<f64>().map_err(|_| err(n, "non-numeric dimension"));
                dims = Some([parse(l)?, parse(w)?, parse(h)?]);
            }
            ["comment", ..] => {}
            ["element", "vertex", k] => {
                count = Some(k.parse::<usize>().map_err(|_| err(n, "vertex count is not an integer"))?);
            }
            ["property", "float", name] => props.push(name.to_string()),
            _ => return Err(err(n, &format!("unexpected header line `{line}`"))),
        }
    }
    if props != ["x", "y", "z"] {
        return Err(err(last_line, "expected properties x, y, z"));
    }
    let class = class.ok_or_else(|| err(last_line, "missing `comment class`"))?;
    let dims = dims.ok_or_else(|| err(last_line, "missing `comment dims`"))?;
    let count = count.ok_or_else(|| err(last_line, "missing `element vertex`"))?;

    let mut points = Vec::with_capacity(count);
    for (n, line) in lines {
        last_line = n;
        if line.is_empty() {
            continue;
        }
        if points.len() == count {
            return Err(err(n, "more vertices than declared"));
        }
        let vals: Vec<f32> = line
            .split_whitespace()
            .map(|s| s.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err(n, "non-numeric coordinate"))?;
        if vals.len() != 3 {
            return Err(err(n, &format!("expected 3 coordinates, found {}", vals.len())));
        }
        points.push([vals[0] as f64, vals[1] as f64, vals[2] as f64]);
    }
    if points.len() != count {
        return Err(err(
            last_line + 1,
            &format!("declared {count} vertices, found {}", points.len()),
        ));
    }
    Ok(Template {
        class,
        points: PointCloud::new(points),
        canonical_dims: dims,
    })
}

pub fn write_template(t: &Template, path: &Path) -> Result<()> {
    std::fs::write(path, template_to_ply(t)).map_err(|e| Error::io(path, e))
}

pub fn read_template(path: &Path) -> Result<Template> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_template_ply(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn extents(c: &PointCloud) -> [f64; 3] {
        let (lo, hi) = c.bounds().unwrap();
        [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]]
    }

    #[test]
    fn extents_match_canonical_dims() {
        for class in ObjectClass::ALL {
            let t = generate_template(class, DEFAULT_TEMPLATE_POINTS, 0).unwrap();
            assert_eq!(t.points.len(), DEFAULT_TEMPLATE_POINTS);
            let e = extents(&t.points);
            for i in 0..3 {
                assert!((e[i] - t.canonical_dims[i]).abs() < 1e-6, "{class}: {e:?}");
            }
        }
    }

    #[test]
    fn pedestrian_proportions() {
        let t = generate_template(ObjectClass::Pedestrian, 1024, 3).unwrap();
        let [depth, width, height] = extents(&t.points);
        assert!((height - 1.73).abs() < 1e-6);
        assert!(width < depth && depth < height);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_template(ObjectClass::Cyclist, 512, 11).unwrap();
        let b = generate_template(ObjectClass::Cyclist, 512, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_template(ObjectClass::Cyclist, 512, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_small_k() {
        assert!(generate_template(ObjectClass::Car, 63, 0).is_err());
    }

    #[test]
    fn car_wheels_hold_points() {
        let t = generate_template(ObjectClass::Car, 1024, 0).unwrap();
        let wheels: Vec<Primitive> = class_primitives(ObjectClass::Car)
            .into_iter()
            .filter(|p| matches!(p, Primitive::Cylinder { .. }))
            .collect();
        assert_eq!(wheels.len(), 4);
        let inside = t
            .points
            .points
            .iter()
            .filter(|p| wheels.iter().any(|w| w.contains(**p, 0.02)))
            .count();
        assert!(inside as f64 >= 0.05 * 1024.0, "only {inside} wheel points");
    }

    #[test]
    fn car_octants_all_populated() {
        let t = generate_template(ObjectClass::Car, 1024, 5).unwrap();
        let mut seen = [0usize; 8];
        for p in &t.points.points {
            let o = (p[0] > 0.0) as usize | ((p[1] > 0.0) as usize) << 1 | ((p[2] > 0.0) as usize) << 2;
            seen[o] += 1;
        }
        assert!(seen.iter().all(|&n| n > 0), "{seen:?}");
    }

    #[test]
    fn apportion_within_one_point() {
        let w = [3.0, 1.0, 0.5, 7.25];
        let counts = apportion(&w, 97);
        assert_eq!(counts.iter().sum::<usize>(), 97);
        let total: f64 = w.iter().sum();
        for (c, wi) in counts.iter().zip(w) {
            assert!((*c as f64 - wi / total * 97.0).abs() < 1.0);
        }
    }

    #[test]
    fn adjust_examples() {
        let t = Template {
            class: ObjectClass::Car,
            points: PointCloud::new(vec![[1.0, 1.0, 1.0]]),
            canonical_dims: [2.0, 1.0, 1.0],
        };
        let out = adjust_template(&t, &Box3D::new(0.0, 0.0, 0.0, 4.0, 2.0, 2.0, 0.0));
        assert_eq!(out.points, vec![[2.0, 2.0, 2.0]]);

        let same = adjust_template(&t, &Box3D::new(0.0, 0.0, 0.0, 2.0, 1.0, 1.0, 0.0));
        assert_eq!(same.points, t.points.points);

        let unit = Template {
            points: PointCloud::new(vec![[1.0, 0.0, 0.0]]),
            ..t
        };
        let rot = adjust_template(&unit, &Box3D::new(0.0, 0.0, 0.0, 2.0, 1.0, 1.0, PI / 2.0));
        let p = rot.points[0];
        assert!(p[0].abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12 && p[2].abs() < 1e-12);
    }

    #[test]
    fn ply_fixture_exact() {
        let text = "ply\nformat ascii 1.0\ncomment class 2\ncomment dims 0.8 0.6 1.73\n\
element vertex 4\nproperty float x\nproperty float y\nproperty float z\nend_header\n\
0 0 0\n0.5 -0.25 1\n-0.4 0.3 -0.865\n0.125 0.0625 0.75\n";
        let t = parse_template_ply(text).unwrap();
        assert_eq!(t.class, ObjectClass::Pedestrian);
        assert_eq!(t.canonical_dims, [0.8, 0.6, 1.73]);
        assert_eq!(
            t.points.points,
            vec![
                [0.0, 0.0, 0.0],
                [0.5, -0.25, 1.0],
                [-0.4f32 as f64, 0.3f32 as f64, -0.865f32 as f64],
                [0.125, 0.0625, 0.75]
            ]
        );
    }

    #[test]
    fn ply_errors_name_the_line() {
        let t = generate_template(ObjectClass::Car, 64, 0).unwrap();
        let text = template_to_ply(&t);
        let truncated: String = text.lines().take(20).map(|l| format!("{l}\n")).collect();
        match parse_template_ply(&truncated) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 21),
            other => panic!("expected parse error, got {other:?}"),
        }
        let bad = text.replacen("element vertex 64", "element vertex sixty", 1);
        assert!(matches!(parse_template_ply(&bad), Err(Error::Parse { line: 5, .. })));
        let bad_coord = text.replacen("end_header\n", "end_header\n1 2 x\n", 1);
        assert!(matches!(parse_template_ply(&bad_coord), Err(Error::Parse { line: 10, .. })));
    }

    #[test]
    fn ply_roundtrip_float32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("car.ply");
        let t = generate_template(ObjectClass::Car, 256, 1).unwrap();
        write_template(&t, &path).unwrap();
        let back = read_template(&path).unwrap();
        assert_eq!(back.class, t.class);
        assert_eq!(back.canonical_dims, t.canonical_dims);
        for (a, b) in t.points.points.iter().zip(&back.points.points) {
            for i in 0..3 {
                assert_eq!(a[i] as f32, b[i] as f32);
            }
        }
    }
}
