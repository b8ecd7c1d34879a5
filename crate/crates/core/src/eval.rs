//! Detection evaluation: KITTI-style label I/O, precision/recall curves,
//! interpolated AP and distance-bucketed AP.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::class::ObjectClass;
use crate::error::{Error, Result};
use crate::geom::{iou3d, Box3D};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub class: ObjectClass,
    pub score: Option<f64>,
}

impl Detection {
    pub fn new(bbox: Box3D, class: ObjectClass, score: Option<f64>) -> Self {
        Detection { bbox, class, score }
    }

    pub fn score_or_one(&self) -> f64 {
        self.score.unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RecallMode {
    R11,
    R40,
}

impl RecallMode {
    pub fn name(self) -> &'static str {
        match self {
            RecallMode::R11 => "R11",
            RecallMode::R40 => "R40",
        }
    }

    pub fn positions(self) -> Vec<f64> {
        match self {
            RecallMode::R11 => (0..=10).map(|i| i as f64 / 10.0).collect(),
            RecallMode::R40 => (1..=40).map(|i| i as f64 / 40.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Indexed by [`ObjectClass::index`].
    pub iou_thresholds: [f64; 3],
    pub mode: RecallMode,
    /// Lower edges of the distance buckets; the last bucket is open-ended.
    pub bucket_edges: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: [0.7, 0.5, 0.5],
            mode: RecallMode::R40,
            bucket_edges: vec![0.0, 20.0, 40.0],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::Config(format!("iou thresholds must lie in (0,1]: {:?}", self.iou_thresholds)));
        }
        if self.bucket_edges.first() != Some(&0.0) {
            return Err(Error::Config("bucket edges must start at 0".into()));
        }
        if self.bucket_edges.windows(2).any(|w| !(w[0] < w[1])) || self.bucket_edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::Config(format!("bucket edges must be finite and increasing: {:?}", self.bucket_edges)));
        }
        Ok(())
    }

    pub fn threshold(&self, class: ObjectClass) -> f64 {
        self.iou_thresholds[class.index()]
    }

    pub fn num_buckets(&self) -> usize {
        self.bucket_edges.len()
    }

    /// Half-open `[lo, hi)` bucket containing distance `d`.
    pub fn bucket_of(&self, d: f64) -> usize {
        self.bucket_edges.iter().rposition(|&e| d >= e).unwrap_or(0)
    }

    pub fn bucket_label(&self, i: usize) -> String {
        let lo = self.bucket_edges[i];
        match self.bucket_edges.get(i + 1) {
            Some(hi) => format!("{lo}-{hi}"),
            None => format!("{lo}-inf"),
        }
    }
}

/// Parsed label file plus one diagnostic per skipped line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedLabels {
    pub detections: Vec<Detection>,
    pub skipped: Vec<String>,
}

fn class_from_kitti(name: &str) -> Option<ObjectClass> {
    ObjectClass::ALL.into_iter().find(|c| c.kitti_name() == name)
}

/// Parses `type trunc occl alpha x1 y1 x2 y2 h w l x y z ry [score]` lines.
/// `z` is the bottom of the box; it is lifted by `h/2` to the center.
pub fn parse_labels(text: &str) -> Result<ParsedLabels> {
    let mut out = ParsedLabels::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 15 && fields.len() != 16 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 15 or 16 fields, found {}", fields.len()),
            });
        }
        let mut nums = [0.0f64; 15];
        for (k, f) in fields[1..].iter().enumerate() {
            nums[k] = f.parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("field {} is not a number: {f:?}", k + 2),
            })?;
        }
        let Some(class) = class_from_kitti(fields[0]) else {
            out.skipped.push(format!("line {line_no}: skipping unknown type {:?}", fields[0]));
            continue;
        };
        let [h, w, l, x, y, z, ry] = [nums[7], nums[8], nums[9], nums[10], nums[11], nums[12], nums[13]];
        let score = (fields.len() == 16).then_some(nums[14]);
        out.detections.push(Detection::new(Box3D::new(x, y, z + h / 2.0, l, w, h, ry), class, score));
    }
    Ok(out)
}

/// Inverse of [`parse_labels`]. Unused 2D fields are written as 0.
pub fn serialize_labels(detections: &[Detection]) -> String {
    let mut s = String::new();
    for d in detections {
        let b = &d.bbox;
        write!(
            s,
            "{} 0 0 0 0 0 0 0 {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            d.class.kitti_name(),
            b.h,
            b.w,
            b.l,
            b.x,
            b.y,
            b.z - b.h / 2.0,
            b.theta
        )
        .unwrap();
        if let Some(score) = d.score {
            write!(s, " {score:.6}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// One point per detection, in descending score order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub num_gt: usize,
}

/// Greedy matching result for one detection of the evaluated class.
#[derive(Debug, Clone, Copy, PartialEq)]
struct MatchedDet {
    det: usize,
    gt: Option<usize>,
}

/// Score-ordered greedy matching. Each detection takes the unmatched
/// same-class ground truth with the highest 3D IoU if that IoU reaches the
/// threshold. Returned in processing order.
fn greedy_match(dets: &[Detection], gts: &[Detection], class: ObjectClass, iou_threshold: f64) -> Vec<MatchedDet> {
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class == class).collect();
    order.sort_by(|&a, &b| dets[b].score_or_one().total_cmp(&dets[a].score_or_one()));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|di| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] || g.class != class {
                    continue;
                }
                let iou = iou3d(&dets[di].bbox, &g.bbox);
                if best.map_or(true, |(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            let gt = match best {
                Some((gi, iou)) if iou >= iou_threshold => {
                    taken[gi] = true;
                    Some(gi)
                }
                _ => None,
            };
            MatchedDet { det: di, gt }
        })
        .collect()
}

fn curve_from_flags(tp_flags: impl IntoIterator<Item = bool>, num_gt: usize) -> PrCurve {
    let mut tp = 0usize;
    let mut points = Vec::new();
    for (k, is_tp) in tp_flags.into_iter().enumerate() {
        tp += is_tp as usize;
        points.push(PrPoint {
            precision: tp as f64 / (k + 1) as f64,
            recall: if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 },
        });
    }
    PrCurve { points, num_gt }
}

pub fn pr_curve(dets: &[Detection], gts: &[Detection], class: ObjectClass, iou_threshold: f64) -> PrCurve {
    let num_gt = gts.iter().filter(|g| g.class == class).count();
    let matches = greedy_match(dets, gts, class, iou_threshold);
    curve_from_flags(matches.iter().map(|m| m.gt.is_some()), num_gt)
}

/// Interpolated AP. `None` when the class has no ground truth.
pub fn average_precision(curve: &PrCurve, mode: RecallMode) -> Option<f64> {
    if curve.num_gt == 0 {
        return None;
    }
    let positions = mode.positions();
    let total: f64 = positions
        .iter()
        .map(|&r| {
            curve
                .points
                .iter()
                .filter(|p| p.recall >= r - 1e-12)
                .map(|p| p.precision)
                .fold(0.0, f64::max)
        })
        .sum();
    Some(total / positions.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApRow {
    pub class: ObjectClass,
    /// `None` for the unbucketed row.
    pub bucket: Option<usize>,
    pub mode: RecallMode,
    pub ap: Option<f64>,
}

/// One scored detection after matching, with the distance bucket it counts toward.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Record {
    score: f64,
    tp: bool,
    bucket: usize,
}

/// Ground truths paired with detections for one frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Frame {
    pub detections: Vec<Detection>,
    pub gts: Vec<Detection>,
}

fn class_records(frames: &[Frame], class: ObjectClass, cfg: &EvalConfig) -> (Vec<Record>, Vec<usize>) {
    let mut records = Vec::new();
    let mut gt_per_bucket = vec![0usize; cfg.num_buckets()];
    for f in frames {
        for g in f.gts.iter().filter(|g| g.class == class) {
            gt_per_bucket[cfg.bucket_of(g.bbox.center_distance())] += 1;
        }
        for m in greedy_match(&f.detections, &f.gts, class, cfg.threshold(class)) {
            let d = match m.gt {
                Some(gi) => f.gts[gi].bbox.center_distance(),
                None => f.detections[m.det].bbox.center_distance(),
            };
            records.push(Record {
                score: f.detections[m.det].score_or_one(),
                tp: m.gt.is_some(),
                bucket: cfg.bucket_of(d),
            });
        }
    }
    records.sort_by(|a, b| b.score.total_cmp(&a.score));
    (records, gt_per_bucket)
}

/// Per-class, per-bucket AP over several frames. Ground truths are bucketed
/// by planar center distance; detections follow their matched ground truth,
/// or their own distance when unmatched.
pub fn bucketed_ap_frames(frames: &[Frame], cfg: &EvalConfig) -> Vec<Vec<Option<f64>>> {
    ObjectClass::ALL
        .iter()
        .map(|&class| {
            let (records, gt_per_bucket) = class_records(frames, class, cfg);
            (0..cfg.num_buckets())
                .map(|b| {
                    let flags = records.iter().filter(|r| r.bucket == b).map(|r| r.tp);
                    average_precision(&curve_from_flags(flags, gt_per_bucket[b]), cfg.mode)
                })
                .collect()
        })
        .collect()
}

pub fn bucketed_ap(dets: &[Detection], gts: &[Detection], cfg: &EvalConfig) -> Vec<Vec<Option<f64>>> {
    bucketed_ap_frames(&[Frame { detections: dets.to_vec(), gts: gts.to_vec() }], cfg)
}

/// Overall and bucketed AP rows for every class, matching within each frame.
pub fn evaluate_frames(frames: &[Frame], cfg: &EvalConfig) -> Vec<ApRow> {
    let mut rows = Vec::new();
    for class in ObjectClass::ALL {
        let (records, gt_per_bucket) = class_records(frames, class, cfg);
        let total_gt: usize = gt_per_bucket.iter().sum();
        rows.push(ApRow {
            class,
            bucket: None,
            mode: cfg.mode,
            ap: average_precision(&curve_from_flags(records.iter().map(|r| r.tp), total_gt), cfg.mode),
        });
        for b in 0..cfg.num_buckets() {
            let flags = records.iter().filter(|r| r.bucket == b).map(|r| r.tp);
            rows.push(ApRow {
                class,
                bucket: Some(b),
                mode: cfg.mode,
                ap: average_precision(&curve_from_flags(flags, gt_per_bucket[b]), cfg.mode),
            });
        }
    }
    rows
}

pub fn evaluate(dets: &[Detection], gts: &[Detection], cfg: &EvalConfig) -> Vec<ApRow> {
    evaluate_frames(&[Frame { detections: dets.to_vec(), gts: gts.to_vec() }], cfg)
}

/// Mean over classes that have ground truth, in AP points (0..100).
pub fn mean_ap_points(rows: &[ApRow]) -> Option<f64> {
    let aps: Vec<f64> = rows.iter().filter(|r| r.bucket.is_none()).filter_map(|r| r.ap).collect();
    (!aps.is_empty()).then(|| 100.0 * aps.iter().sum::<f64>() / aps.len() as f64)
}

/// CSV with header `class,bucket,mode,ap`; classes without ground truth
/// are written as `skipped`.
pub fn results_csv(rows: &[ApRow], cfg: &EvalConfig) -> String {
    let mut s = String::from("class,bucket,mode,ap\n");
    for r in rows {
        let bucket = r.bucket.map_or_else(|| "all".to_string(), |b| cfg.bucket_label(b));
        let ap = r.ap.map_or_else(|| "skipped".to_string(), |a| format!("{a:.6}"));
        writeln!(s, "{},{},{},{}", r.class.kitti_name(), bucket, r.mode.name(), ap).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car_at(x: f64, y: f64, score: Option<f64>) -> Detection {
        Detection::new(Box3D::new(x, y, 0.0, 3.9, 1.6, 1.56, 0.0), ObjectClass::Car, score)
    }

    #[test]
    fn parse_field_mapping() {
        let p = parse_labels("Car 0 0 0 0 0 0 0 1.5 1.6 3.9 5.0 0.0 10.0 0.0 0.9\n").unwrap();
        let d = p.detections[0];
        assert_eq!(d.class, ObjectClass::Car);
        assert_eq!(d.score, Some(0.9));
        let b = d.bbox;
        assert_eq!([b.x, b.y, b.l, b.w, b.h, b.theta], [5.0, 0.0, 3.9, 1.6, 1.5, 0.0]);
        assert!((b.z - 10.75).abs() < 1e-12);

        let p = parse_labels("Car 0 0 0 0 0 0 0 1.5 1.6 3.9 5.0 0.0 0.0 0.0 0.9\n").unwrap();
        assert!((p.detections[0].bbox.z - 0.75).abs() < 1e-12);
    }

    #[test]
    fn parse_errors_carry_line() {
        let text = "Car 0 0 0 0 0 0 0 1.5 1.6 3.9 5.0 0.0 0.0 0.0\nCar 0 0 0 0 0 0 0 1.5 1.6 3.9 5.0 0.0 0.0\n";
        match parse_labels(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_labels("Car 0 0 0 0 0 0 0 x 1.6 3.9 5.0 0.0 0.0 0.0") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_types_are_skipped() {
        let text = "DontCare 0 0 0 0 0 0 0 1 1 1 1 1 1 0\nPedestrian 0 0 0 0 0 0 0 1.7 0.6 0.8 3 1 0 0\n";
        let p = parse_labels(text).unwrap();
        assert_eq!(p.detections.len(), 1);
        assert_eq!(p.skipped.len(), 1);
        assert!(p.skipped[0].contains("line 1"));
    }

    #[test]
    fn serialize_shapes_and_roundtrip() {
        assert_eq!(serialize_labels(&[]), "");
        let d = Detection::new(Box3D::new(5.0, -2.0, 0.3, 3.9, 1.6, 1.5, 0.4), ObjectClass::Car, Some(0.9));
        let text = serialize_labels(&[d]);
        assert_eq!(text.lines().count(), 1);
        assert_eq!(text.split_whitespace().count(), 16);
        let back = parse_labels(&text).unwrap().detections[0];
        for (a, b) in back.bbox.to_array().iter().zip(d.bbox.to_array()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(serialize_labels(&[back]), text);
    }

    #[test]
    fn perfect_and_total_miss() {
        let gts = vec![car_at(5.0, 0.0, None), car_at(15.0, 3.0, None)];
        let dets: Vec<Detection> = gts.iter().map(|g| Detection { score: Some(0.8), ..*g }).collect();
        let c = pr_curve(&dets, &gts, ObjectClass::Car, 0.7);
        assert!(c.points.iter().all(|p| p.precision == 1.0));
        for mode in [RecallMode::R11, RecallMode::R40] {
            assert_eq!(average_precision(&c, mode), Some(1.0));
        }
        let miss = pr_curve(&[car_at(30.0, 10.0, Some(0.5))], &gts[..1], ObjectClass::Car, 0.7);
        assert_eq!(miss.points, vec![PrPoint { precision: 0.0, recall: 0.0 }]);
        assert_eq!(average_precision(&miss, RecallMode::R11), Some(0.0));
        let empty = pr_curve(&[], &gts, ObjectClass::Car, 0.7);
        assert_eq!(average_precision(&empty, RecallMode::R40), Some(0.0));
        assert_eq!(average_precision(&pr_curve(&dets, &gts, ObjectClass::Cyclist, 0.5), RecallMode::R40), None);
    }

    #[test]
    fn three_gt_table() {
        let gts = vec![car_at(5.0, 0.0, None), car_at(15.0, 0.0, None), car_at(25.0, 0.0, None)];
        let dets = vec![car_at(5.0, 0.0, Some(0.9)), car_at(10.0, 8.0, Some(0.8)), car_at(15.0, 0.0, Some(0.7))];
        let c = pr_curve(&dets, &gts, ObjectClass::Car, 0.7);
        let expect = [(1.0, 1.0 / 3.0), (0.5, 1.0 / 3.0), (2.0 / 3.0, 2.0 / 3.0)];
        for (p, (pr, rc)) in c.points.iter().zip(expect) {
            assert!((p.precision - pr).abs() < 1e-12 && (p.recall - rc).abs() < 1e-12);
        }
        // recall positions 0..0.3 see precision 1, 0.4..0.6 see 2/3, the rest 0
        let r11 = average_precision(&c, RecallMode::R11).unwrap();
        assert!((r11 - 6.0 / 11.0).abs() < 1e-12);
        // 13 positions up to 1/3 see 1, the next 13 up to 2/3 see 2/3
        let r40 = average_precision(&c, RecallMode::R40).unwrap();
        assert!((r40 - (13.0 + 13.0 * 2.0 / 3.0) / 40.0).abs() < 1e-12);
    }

    #[test]
    fn buckets_half_open() {
        let cfg = EvalConfig::default();
        assert_eq!(cfg.bucket_of(10.0), 0);
        assert_eq!(cfg.bucket_of(20.0), 1);
        assert_eq!(cfg.bucket_of(39.999), 1);
        assert_eq!(cfg.bucket_of(40.0), 2);
        assert_eq!(cfg.bucket_of(1e6), 2);
        assert_eq!(cfg.bucket_label(2), "40-inf");

        let gts = vec![car_at(10.0, 0.0, None)];
        let aps = bucketed_ap(&[car_at(10.0, 0.0, Some(1.0))], &gts, &cfg);
        assert_eq!(aps[0], vec![Some(1.0), None, None]);
        let at20 = bucketed_ap(&[], &[car_at(20.0, 0.0, None)], &cfg);
        assert_eq!(at20[0], vec![None, Some(0.0), None]);
    }

    #[test]
    fn csv_rows() {
        let cfg = EvalConfig::default();
        let gts = vec![car_at(10.0, 0.0, None)];
        let rows = evaluate(&gts, &gts, &cfg);
        let csv = results_csv(&rows, &cfg);
        assert!(csv.starts_with("class,bucket,mode,ap\nCar,all,R40,1.000000\n"));
        assert!(csv.contains("Pedestrian,all,R40,skipped"));
        assert_eq!(mean_ap_points(&rows), Some(100.0));
    }

    #[test]
    fn frames_match_independently() {
        let cfg = EvalConfig::default();
        let g = car_at(10.0, 0.0, None);
        let d = car_at(10.0, 0.0, Some(0.9));
        let two = [
            Frame { detections: vec![d], gts: vec![g] },
            Frame { detections: vec![d], gts: vec![g] },
        ];
        assert_eq!(evaluate_frames(&two, &cfg)[0].ap, Some(1.0));
        // pooled into one frame, the second copy would be a false positive
        let pooled = evaluate(&[d, d], &[g], &cfg);
        assert!(pooled[0].ap.unwrap() == 1.0);
        let missed = [
            Frame { detections: vec![d], gts: vec![g] },
            Frame { detections: vec![], gts: vec![g] },
        ];
        let ap = evaluate_frames(&missed, &cfg)[0].ap.unwrap();
        assert!((ap - 20.0 / 40.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(EvalConfig::default().validate().is_ok());
        let bad = EvalConfig { bucket_edges: vec![0.0, 40.0, 20.0], ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = EvalConfig { iou_thresholds: [0.0, 0.5, 0.5], ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
