//! IoU-based target assignment for anchors and proposals.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::class::ObjectClass;
use crate::error::{Error, Result};
use crate::geom::{bev_iou, encode_box, iou3d, Box3D};

/// Positive/negative IoU thresholds for one anchor class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorThresholds {
    pub pos: f64,
    pub neg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignmentConfig {
    /// Proposals above this IoU are foreground for the contrastive loss.
    pub fg_threshold: f64,
    /// Proposals below this IoU are background.
    pub bg_threshold: f64,
    /// Indexed by [`ObjectClass::index`].
    pub anchor_thresholds: [AnchorThresholds; 3],
    pub train_nms_threshold: f64,
    pub train_keep: usize,
    pub positive_sample_iou: f64,
    pub sample_size: usize,
}

impl Default for AssignmentConfig {
    fn default() -> Self {
        AssignmentConfig {
            fg_threshold: 0.75,
            bg_threshold: 0.25,
            anchor_thresholds: [
                AnchorThresholds { pos: 0.6, neg: 0.45 },
                AnchorThresholds { pos: 0.5, neg: 0.35 },
                AnchorThresholds { pos: 0.5, neg: 0.35 },
            ],
            train_nms_threshold: 0.8,
            train_keep: 128,
            positive_sample_iou: 0.55,
            sample_size: 128,
        }
    }
}

impl AssignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.bg_threshold && self.bg_threshold < self.fg_threshold && self.fg_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= bg_threshold < fg_threshold <= 1, got {} / {}",
                self.bg_threshold, self.fg_threshold
            )));
        }
        for t in &self.anchor_thresholds {
            if !(t.neg < t.pos) {
                return Err(Error::Config(format!("anchor neg {} must be below pos {}", t.neg, t.pos)));
            }
        }
        Ok(())
    }
}

/// Best ground-truth match for one box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtMatch {
    pub iou: f64,
    /// `None` when no ground truth overlaps.
    pub gt_index: Option<usize>,
}

/// Highest 3D IoU over all ground truths for each proposal (lowest index on ties).
pub fn match_proposals_to_gt(proposals: &[Box3D], gts: &[Box3D]) -> Vec<GtMatch> {
    proposals
        .iter()
        .map(|p| {
            let mut best = GtMatch { iou: 0.0, gt_index: None };
            for (j, g) in gts.iter().enumerate() {
                let iou = iou3d(p, g);
                if iou > best.iou {
                    best = GtMatch { iou, gt_index: Some(j) };
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalClass {
    Background,
    Foreground(ObjectClass),
    Ignored,
}

impl ProposalClass {
    /// Label id for the contrastive loss (0 = background); `None` if ignored.
    pub fn label_id(self) -> Option<u8> {
        match self {
            ProposalClass::Background => Some(0),
            ProposalClass::Foreground(c) => Some(c.id()),
            ProposalClass::Ignored => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalLabel {
    pub class: ProposalClass,
    pub matched_gt: Option<usize>,
    pub matched_iou: f64,
}

/// Three-way labeling: IoU above `fg_threshold` takes the matched ground
/// truth's class, below `bg_threshold` is background, anything between is ignored.
pub fn label_proposals(matches: &[GtMatch], gt_classes: &[ObjectClass], cfg: &AssignmentConfig) -> Vec<ProposalLabel> {
    matches
        .iter()
        .map(|m| {
            let class = if m.iou > cfg.fg_threshold {
                let gi = m.gt_index.expect("positive IoU implies a match");
                ProposalClass::Foreground(gt_classes[gi])
            } else if m.iou < cfg.bg_threshold {
                ProposalClass::Background
            } else {
                ProposalClass::Ignored
            };
            ProposalLabel {
                class,
                matched_gt: m.gt_index,
                matched_iou: m.iou,
            }
        })
        .collect()
}

/// Per-anchor labels (−1 ignored, 0 negative, class id if positive),
/// regression targets and matches.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTargets {
    pub labels: Vec<i32>,
    pub targets: Vec<[f64; 7]>,
    pub matched_gt: Vec<Option<usize>>,
    pub ious: Vec<f64>,
}

impl AnchorTargets {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l >= 1).count()
    }
}

/// Class-specific anchor assignment on BEV IoU. Anchors only compete for
/// ground truths of their own class; each ground truth additionally claims
/// its single best anchor. Regression targets use the ground-truth heading
/// flipped by π when that is closer to the anchor's.
pub fn anchor_targets(
    anchors: &[Box3D],
    anchor_classes: &[ObjectClass],
    gts: &[Box3D],
    gt_classes: &[ObjectClass],
    cfg: &AssignmentConfig,
) -> AnchorTargets {
    assert_eq!(anchors.len(), anchor_classes.len());
    assert_eq!(gts.len(), gt_classes.len());
    let n = anchors.len();
    let mut ious = vec![0.0; n];
    let mut matched: Vec<Option<usize>> = vec![None; n];
    let mut best_for_gt: Vec<(f64, Option<usize>)> = vec![(0.0, None); gts.len()];
    for (g, gt) in gts.iter().enumerate() {
        for (i, a) in anchors.iter().enumerate() {
            if anchor_classes[i] != gt_classes[g] {
                continue;
            }
            let iou = bev_iou(a, gt);
            if iou <= 0.0 {
                continue;
            }
            if iou > ious[i] {
                ious[i] = iou;
                matched[i] = Some(g);
            }
            if iou > best_for_gt[g].0 {
                best_for_gt[g] = (iou, Some(i));
            }
        }
    }
    let mut labels: Vec<i32> = (0..n)
        .map(|i| {
            let t = cfg.anchor_thresholds[anchor_classes[i].index()];
            if ious[i] >= t.pos {
                anchor_classes[i].id() as i32
            } else if ious[i] < t.neg {
                0
            } else {
                -1
            }
        })
        .collect();
    for (g, (iou, best)) in best_for_gt.iter().enumerate() {
        if let Some(i) = best {
            labels[*i] = gt_classes[g].id() as i32;
            matched[*i] = Some(g);
            ious[*i] = *iou;
        }
    }
    let targets = (0..n)
        .map(|i| match (labels[i] >= 1, matched[i]) {
            (true, Some(g)) => encode_box(&gts[g].aligned_heading(anchors[i].theta), &anchors[i]).to_array(),
            _ => [0.0; 7],
        })
        .collect();
    AnchorTargets {
        labels,
        targets,
        matched_gt: matched,
        ious,
    }
}

/// Picks up to `n/2` positives (IoU ≥ `pos_iou`) and fills the rest with
/// negatives; a shortage on either side is filled from the other. Returns
/// sorted, distinct indices.
pub fn sample_balanced(ious: &[f64], n: usize, pos_iou: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..ious.len()).partition(|&i| ious[i] >= pos_iou);
    let want_pos = (n / 2).min(pos.len());
    let want_neg = (n - want_pos).min(neg.len());
    let want_pos = (n - want_neg).min(pos.len());
    let mut out: Vec<usize> = sample(&mut rng, pos.len(), want_pos).into_iter().map(|k| pos[k]).collect();
    out.extend(sample(&mut rng, neg.len(), want_neg).into_iter().map(|k| neg[k]));
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car(x: f64, y: f64) -> Box3D {
        Box3D::new(x, y, 0.0, 3.9, 1.6, 1.56, 0.0)
    }

    #[test]
    fn match_identity_and_empty() {
        let g = car(5.0, 0.0);
        let m = match_proposals_to_gt(&[g], &[g]);
        assert!((m[0].iou - 1.0).abs() < 1e-12);
        assert_eq!(m[0].gt_index, Some(0));
        let none = match_proposals_to_gt(&[g, car(1.0, 1.0)], &[]);
        assert!(none.iter().all(|m| m.iou == 0.0 && m.gt_index.is_none()));
    }

    #[test]
    fn three_way_labels() {
        let cfg = AssignmentConfig::default();
        let matches = [
            GtMatch { iou: 0.8, gt_index: Some(0) },
            GtMatch { iou: 0.10, gt_index: Some(0) },
            GtMatch { iou: 0.5, gt_index: Some(0) },
            GtMatch { iou: 0.75, gt_index: Some(0) },
            GtMatch { iou: 0.25, gt_index: Some(0) },
        ];
        let labels = label_proposals(&matches, &[ObjectClass::Car], &cfg);
        let classes: Vec<ProposalClass> = labels.iter().map(|l| l.class).collect();
        assert_eq!(
            classes,
            vec![
                ProposalClass::Foreground(ObjectClass::Car),
                ProposalClass::Background,
                ProposalClass::Ignored,
                ProposalClass::Ignored,
                ProposalClass::Ignored,
            ]
        );
        assert_eq!(labels[0].class.label_id(), Some(1));
        assert_eq!(labels[2].class.label_id(), None);
    }

    #[test]
    fn anchor_identity_and_disjoint() {
        let gt = car(5.0, 0.0);
        let anchors = [gt, car(30.0, 10.0)];
        let t = anchor_targets(
            &anchors,
            &[ObjectClass::Car, ObjectClass::Car],
            &[gt],
            &[ObjectClass::Car],
            &AssignmentConfig::default(),
        );
        assert_eq!(t.labels, vec![1, 0]);
        assert_eq!(t.targets[0], [0.0; 7]);
    }

    #[test]
    fn anchors_ignore_other_classes() {
        let gt = car(5.0, 0.0);
        let t = anchor_targets(
            &[gt],
            &[ObjectClass::Pedestrian],
            &[gt],
            &[ObjectClass::Car],
            &AssignmentConfig::default(),
        );
        assert_eq!(t.labels, vec![0]);
    }

    #[test]
    fn weak_best_anchor_is_forced_positive() {
        let gt = car(5.0, 0.0);
        let weak = car(7.0, 0.0);
        let t = anchor_targets(&[weak], &[ObjectClass::Car], &[gt], &[ObjectClass::Car], &AssignmentConfig::default());
        assert!(t.ious[0] < 0.45);
        assert_eq!(t.labels, vec![1]);
    }

    #[test]
    fn balanced_sampling() {
        let mut ious = vec![0.9; 200];
        ious.extend(vec![0.1; 200]);
        let s = sample_balanced(&ious, 128, 0.55, 7);
        assert_eq!(s.len(), 128);
        assert_eq!(s.iter().filter(|&&i| ious[i] >= 0.55).count(), 64);

        let mut scarce = vec![0.7; 10];
        scarce.extend(vec![0.2; 300]);
        let s = sample_balanced(&scarce, 128, 0.55, 7);
        assert_eq!(s.iter().filter(|&&i| scarce[i] >= 0.55).count(), 10);
        assert_eq!(s.len(), 128);

        assert_eq!(sample_balanced(&scarce, 128, 0.55, 3), sample_balanced(&scarce, 128, 0.55, 3));
        let few = sample_balanced(&[0.9, 0.1, 0.6], 128, 0.55, 0);
        assert_eq!(few, vec![0, 1, 2]);
    }

    #[test]
    fn config_validation() {
        assert!(AssignmentConfig::default().validate().is_ok());
        let bad = AssignmentConfig { bg_threshold: 0.8, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
