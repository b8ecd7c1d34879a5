//! Synthetic LiDAR scenes built from class templates plus ground and pole clutter.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::SceneGenConfig;
use crate::class::ObjectClass;
use crate::error::{Error, Result};
use crate::eval::{parse_labels, serialize_labels, Detection};
use crate::geom::{bev_iou, Box3D};
use crate::pointops::{Point3, PointCloud};
use crate::templates::{adjust_template, generate_template};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub cloud: PointCloud,
    pub gt_boxes: Vec<Box3D>,
    pub gt_classes: Vec<ObjectClass>,
    pub seed: u64,
    /// One entry per object dropped for lack of points.
    pub diagnostics: Vec<String>,
}

impl SceneSample {
    pub fn gt_detections(&self) -> Vec<Detection> {
        self.gt_boxes
            .iter()
            .zip(&self.gt_classes)
            .map(|(b, c)| Detection::new(*b, *c, None))
            .collect()
    }
}

fn decay_keep(cfg: &SceneGenConfig, d: f64) -> f64 {
    (cfg.decay_d0 / d.max(1e-9)).powi(2).min(1.0)
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn add_noise<R: Rng>(p: Point3, sigma: f64, rng: &mut R) -> Point3 {
    [p[0] + sigma * gauss(rng), p[1] + sigma * gauss(rng), p[2] + sigma * gauss(rng)]
}

/// Drops points on the far side of `center` as seen from the sensor at the origin.
fn sensor_facing(points: Vec<Point3>, center: [f64; 2]) -> Vec<Point3> {
    let n = (center[0] * center[0] + center[1] * center[1]).sqrt().max(1e-9);
    let dir = [center[0] / n, center[1] / n];
    let c = center[0] * dir[0] + center[1] * dir[1];
    points.into_iter().filter(|p| p[0] * dir[0] + p[1] * dir[1] <= c).collect()
}

/// Visible, decayed and noisy surface points of one object.
pub fn render_object<R: Rng>(
    cfg: &SceneGenConfig,
    class: ObjectClass,
    bbox: &Box3D,
    template_seed: u64,
    rng: &mut R,
) -> Result<Vec<Point3>> {
    let t = generate_template(class, cfg.template_points[class.index()], template_seed)?;
    let pts = sensor_facing(adjust_template(&t, bbox).points, [bbox.x, bbox.y]);
    let keep = decay_keep(cfg, bbox.center_distance());
    let mut pts: Vec<Point3> = pts.into_iter().filter(|_| rng.random::<f64>() < keep).collect();
    if rng.random::<f64>() < cfg.occlusion_prob && !pts.is_empty() {
        let frac = cfg.occlusion_keep + (1.0 - cfg.occlusion_keep) * rng.random::<f64>();
        let from_left = rng.random::<bool>();
        let mut az: Vec<(f64, usize)> = pts.iter().enumerate().map(|(i, p)| (p[1].atan2(p[0]), i)).collect();
        az.sort_by(|a, b| a.0.total_cmp(&b.0));
        let kept = (frac * pts.len() as f64).round() as usize;
        let range = if from_left { 0..kept } else { az.len() - kept..az.len() };
        let mut idx: Vec<usize> = az[range].iter().map(|&(_, i)| i).collect();
        idx.sort_unstable();
        pts = idx.into_iter().map(|i| pts[i]).collect();
    }
    Ok(pts.into_iter().map(|p| add_noise(p, cfg.noise_sigma, rng)).collect())
}

fn in_footprint(b: &Box3D, x: f64, y: f64, pad: f64) -> bool {
    let l = b.to_local([x, y, b.z]);
    l[0].abs() <= b.l / 2.0 + pad && l[1].abs() <= b.w / 2.0 + pad
}

fn place_object<R: Rng>(cfg: &SceneGenConfig, placed: &[Box3D], rng: &mut R) -> Result<(ObjectClass, Box3D)> {
    let classes = WeightedIndex::new(cfg.class_weights).map_err(|e| Error::Config(e.to_string()))?;
    for _ in 0..cfg.max_attempts {
        let class = ObjectClass::ALL[classes.sample(rng)];
        let base = class.canonical_dims();
        let mut dims = [0.0; 3];
        for k in 0..3 {
            dims[k] = base[k] * (1.0 + cfg.dim_jitter[k] * gauss(rng)).clamp(0.7, 1.3);
        }
        let r = 0.5 * (dims[0] * dims[0] + dims[1] * dims[1]).sqrt();
        let (x0, x1) = (cfg.x_range[0] + r, cfg.x_range[1] - r);
        let (y0, y1) = (cfg.y_range[0] + r, cfg.y_range[1] - r);
        if !(x0 < x1 && y0 < y1) {
            continue;
        }
        let x = rng.random_range(x0..x1);
        let y = rng.random_range(y0..y1);
        let theta = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        if (x * x + y * y).sqrt() < cfg.min_range {
            continue;
        }
        let b = Box3D::new(x, y, cfg.ground_z() + dims[2] / 2.0, dims[0], dims[1], dims[2], theta);
        if placed.iter().all(|p| bev_iou(p, &b) == 0.0) {
            return Ok((class, b));
        }
    }
    Err(Error::Infeasible(format!(
        "could not place an object without overlap after {} attempts",
        cfg.max_attempts
    )))
}

fn ground_points<R: Rng>(cfg: &SceneGenConfig, boxes: &[Box3D], rng: &mut R) -> Vec<Point3> {
    let area = (cfg.x_range[1] - cfg.x_range[0]) * (cfg.y_range[1] - cfg.y_range[0]);
    let n = (cfg.ground_density * area).round() as usize;
    let mut out = Vec::new();
    for _ in 0..n {
        let x = rng.random_range(cfg.x_range[0]..cfg.x_range[1]);
        let y = rng.random_range(cfg.y_range[0]..cfg.y_range[1]);
        let d = (x * x + y * y).sqrt();
        if d < 1.0 || rng.random::<f64>() >= decay_keep(cfg, d) {
            continue;
        }
        if boxes.iter().any(|b| in_footprint(b, x, y, 0.0)) {
            continue;
        }
        out.push(add_noise([x, y, cfg.ground_z()], cfg.noise_sigma, rng));
    }
    out
}

fn pole_points<R: Rng>(cfg: &SceneGenConfig, boxes: &[Box3D], rng: &mut R) -> Vec<Point3> {
    let count = rng.random_range(0..=cfg.max_poles);
    let mut out = Vec::new();
    for _ in 0..count {
        let radius = rng.random_range(0.05..0.15);
        let height = rng.random_range(2.0..4.0);
        let x = rng.random_range(cfg.x_range[0] + 1.0..cfg.x_range[1] - 1.0);
        let y = rng.random_range(cfg.y_range[0] + 1.0..cfg.y_range[1] - 1.0);
        if (x * x + y * y).sqrt() < cfg.min_range || boxes.iter().any(|b| in_footprint(b, x, y, 0.5)) {
            continue;
        }
        let surface: Vec<Point3> = (0..cfg.pole_points)
            .map(|_| {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                [x + radius * a.cos(), y + radius * a.sin(), cfg.ground_z() + height * rng.random::<f64>()]
            })
            .collect();
        let keep = decay_keep(cfg, (x * x + y * y).sqrt());
        for p in sensor_facing(surface, [x, y]) {
            if rng.random::<f64>() < keep {
                out.push(add_noise(p, cfg.noise_sigma, rng));
            }
        }
    }
    out
}

/// Deterministic per `seed`. Objects never overlap in bird's-eye view.
pub fn generate_scene(cfg: &SceneGenConfig, seed: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut boxes = Vec::with_capacity(n);
    let mut classes = Vec::with_capacity(n);
    for _ in 0..n {
        let (c, b) = place_object(cfg, &boxes, &mut rng)?;
        boxes.push(b);
        classes.push(c);
    }
    let mut points = Vec::new();
    let mut gt_boxes = Vec::new();
    let mut gt_classes = Vec::new();
    let mut diagnostics = Vec::new();
    for (i, (b, c)) in boxes.iter().zip(&classes).enumerate() {
        let tseed = rng.random::<u64>();
        let pts = render_object(cfg, *c, b, tseed, &mut rng)?;
        if pts.len() < cfg.min_points.max(1) {
            diagnostics.push(format!(
                "object {i} ({c}) at {:.1} m dropped: {} points",
                b.center_distance(),
                pts.len()
            ));
            continue;
        }
        points.extend(pts);
        gt_boxes.push(*b);
        gt_classes.push(*c);
    }
    points.extend(ground_points(cfg, &boxes, &mut rng));
    points.extend(pole_points(cfg, &boxes, &mut rng));
    Ok(SceneSample {
        cloud: PointCloud::new(points),
        gt_boxes,
        gt_classes,
        seed,
        diagnostics,
    })
}

pub fn cloud_to_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut buf = Vec::with_capacity(cloud.len() * 12);
    for p in &cloud.points {
        for v in p {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    buf
}

pub fn cloud_from_bin(buf: &[u8]) -> Result<PointCloud> {
    if buf.len() % 12 != 0 {
        return Err(Error::InvalidArgument(format!(
            "point file length {} is not a multiple of 12 bytes",
            buf.len()
        )));
    }
    let f = |c: &[u8]| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
    Ok(PointCloud::new(
        buf.chunks_exact(12).map(|c| [f(&c[0..4]), f(&c[4..8]), f(&c[8..12])]).collect(),
    ))
}

/// Writes `<stem>.bin` and `<stem>.txt` into `dir`; returns both paths.
pub fn write_scene(scene: &SceneSample, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bin = dir.join(format!("{stem}.bin"));
    let txt = dir.join(format!("{stem}.txt"));
    let mut f = std::fs::File::create(&bin).map_err(|e| Error::io(&bin, e))?;
    f.write_all(&cloud_to_bin(&scene.cloud)).map_err(|e| Error::io(&bin, e))?;
    std::fs::write(&txt, serialize_labels(&scene.gt_detections())).map_err(|e| Error::io(&txt, e))?;
    Ok((bin, txt))
}

/// Reads a scene dump back. The seed is unknown and set to 0.
pub fn read_scene(bin: &Path, labels: &Path) -> Result<SceneSample> {
    let buf = std::fs::read(bin).map_err(|e| Error::io(bin, e))?;
    let cloud = cloud_from_bin(&buf)?;
    let text = std::fs::read_to_string(labels).map_err(|e| Error::io(labels, e))?;
    let parsed = parse_labels(&text)?;
    Ok(SceneSample {
        cloud,
        gt_boxes: parsed.detections.iter().map(|d| d.bbox).collect(),
        gt_classes: parsed.detections.iter().map(|d| d.class).collect(),
        seed: 0,
        diagnostics: parsed.skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointops::points_in_box;

    #[test]
    fn deterministic_and_non_overlapping() {
        let cfg = SceneGenConfig::default();
        let a = generate_scene(&cfg, 11).unwrap();
        let b = generate_scene(&cfg, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.cloud, generate_scene(&cfg, 12).unwrap().cloud);
        for i in 0..a.gt_boxes.len() {
            for j in i + 1..a.gt_boxes.len() {
                assert_eq!(bev_iou(&a.gt_boxes[i], &a.gt_boxes[j]), 0.0);
            }
        }
    }

    #[test]
    fn every_kept_object_has_points() {
        let cfg = SceneGenConfig::default();
        for seed in 0..10 {
            let s = generate_scene(&cfg, seed).unwrap();
            for b in &s.gt_boxes {
                assert!(!points_in_box(&s.cloud, b, 1.05).is_empty());
            }
        }
    }

    #[test]
    fn clutter_only_scene() {
        let cfg = SceneGenConfig { min_objects: 0, max_objects: 0, ..Default::default() };
        let s = generate_scene(&cfg, 3).unwrap();
        assert!(s.gt_boxes.is_empty());
        assert!(!s.cloud.is_empty());
    }

    #[test]
    fn infeasible_packing_errors() {
        let cfg = SceneGenConfig {
            x_range: [0.0, 6.0],
            y_range: [-3.0, 3.0],
            min_range: 0.0,
            min_objects: 8,
            max_objects: 8,
            class_weights: [1.0, 0.0, 0.0],
            max_attempts: 50,
            ..Default::default()
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn visible_points_face_the_sensor() {
        let cfg = SceneGenConfig { noise_sigma: 0.0, occlusion_prob: 0.0, ..Default::default() };
        let b = Box3D::new(8.0, 0.0, -0.72, 3.9, 1.6, 1.56, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts = render_object(&cfg, ObjectClass::Car, &b, 5, &mut rng).unwrap();
        assert!(!pts.is_empty());
        assert!(pts.iter().all(|p| p[0] <= 8.0 + 1e-9));
    }

    #[test]
    fn bin_roundtrip() {
        let s = generate_scene(&SceneGenConfig::default(), 4).unwrap();
        let back = cloud_from_bin(&cloud_to_bin(&s.cloud)).unwrap();
        assert_eq!(back.len(), s.cloud.len());
        for (a, b) in back.points.iter().zip(&s.cloud.points) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-5);
            }
        }
        assert!(cloud_from_bin(&[0u8; 13]).is_err());
    }
}
