//! Batch helpers shared by the command-line tool and the acceptance tests.

use std::fmt::Write as _;

use super::config::{AblationFlags, Config};
use super::detector::Detector;
use super::scene::{generate_scene, SceneSample};
use super::train::{train_variants, EpochLoss};
use crate::class::ObjectClass;
use crate::error::Result;
use crate::eval::{evaluate_frames, mean_ap_points, ApRow, EvalConfig, Frame};

/// `n` scenes with seeds `base_seed, base_seed + 1, ...`.
pub fn generate_scenes(cfg: &Config, n: usize, base_seed: u64) -> Result<Vec<SceneSample>> {
    (0..n as u64).map(|i| generate_scene(&cfg.scene, base_seed.wrapping_add(i))).collect()
}

pub fn evaluate_detector(det: &Detector, scenes: &[SceneSample], cfg: &EvalConfig) -> Result<Vec<ApRow>> {
    let frames = scenes
        .iter()
        .map(|s| {
            Ok(Frame {
                detections: det.infer(&s.cloud)?,
                gts: s.gt_detections(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate_frames(&frames, cfg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub method: char,
    pub flags: AblationFlags,
    /// Overall AP per class in points (0..100); `None` without ground truth.
    pub class_ap: [Option<f64>; 3],
    pub mean_ap: Option<f64>,
    pub log: Vec<EpochLoss>,
    pub diverged: Option<usize>,
}

pub const ABLATION_HEADER: [&str; 6] = ["method", "TAFE", "PSCL", "car AP", "ped AP", "cyc AP"];

fn fmt_ap(ap: Option<f64>) -> String {
    ap.map_or_else(|| "skipped".to_string(), |a| format!("{a:.2}"))
}

impl AblationRow {
    pub fn cells(&self) -> Vec<String> {
        let mark = |b: bool| if b { "yes" } else { "no" }.to_string();
        let mut v = vec![self.method.to_string(), mark(self.flags.use_tafe), mark(self.flags.use_pscl)];
        v.extend(self.class_ap.iter().map(|a| fmt_ap(*a)));
        v
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = ABLATION_HEADER.join(",");
    s.push('\n');
    for r in rows {
        writeln!(s, "{}", r.cells().join(",")).unwrap();
    }
    s
}

/// Trains the four module variants on `train.num_scenes` scenes and
/// evaluates each on `eval_scenes` held-out scenes.
pub fn run_ablation(cfg: &Config, eval_scenes: usize) -> Result<(Vec<AblationRow>, Vec<Detector>)> {
    let train_set = generate_scenes(cfg, cfg.train.num_scenes, cfg.train.scene_seed)?;
    let grid = AblationFlags::grid();
    let outcomes = train_variants(cfg, &train_set, &grid.map(|g| g.1))?;
    drop(train_set);
    let eval_set = generate_scenes(cfg, eval_scenes, cfg.ablation.eval_scene_seed)?;
    let mut rows = Vec::new();
    let mut dets = Vec::new();
    for ((method, flags), o) in grid.into_iter().zip(outcomes) {
        let ap = evaluate_detector(&o.detector, &eval_set, &cfg.infer.eval)?;
        let mut class_ap = [None; 3];
        for r in ap.iter().filter(|r| r.bucket.is_none()) {
            class_ap[r.class.index()] = r.ap.map(|a| 100.0 * a);
        }
        rows.push(AblationRow {
            method,
            flags,
            class_ap,
            mean_ap: mean_ap_points(&ap),
            log: o.log,
            diverged: o.diverged,
        });
        dets.push(o.detector);
    }
    Ok((rows, dets))
}

/// Per-class overall AP from evaluation rows, in points.
pub fn class_ap_points(rows: &[ApRow], class: ObjectClass) -> Option<f64> {
    rows.iter()
        .find(|r| r.bucket.is_none() && r.class == class)
        .and_then(|r| r.ap)
        .map(|a| 100.0 * a)
}
