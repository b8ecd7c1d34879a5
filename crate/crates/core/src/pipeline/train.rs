//! Training: focal/Smooth-L1 proposal loss on the RPN, and the refinement
//! loss with optional template-feature and contrastive terms. Several
//! refinement variants can be trained in lockstep against one shared RPN.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{AblationFlags, Config};
use super::detector::{residual_to_frame, Detector};
use super::refine::{RefineGrads, Refiner};
use super::rpn::Proposal;
use super::scene::SceneSample;
use crate::assign::{anchor_targets, label_proposals, match_proposals_to_gt, sample_balanced};
use crate::class::ObjectClass;
use crate::error::{Error, Result};
use crate::geom::{encode_box, Box3D};
use crate::losses::{
    confidence_label, rcnn_loss, rpn_loss, supcon_loss, AnchorBatch, ConfTerms, ContrastiveBatch, RegTerms,
    TemplateLossBatch,
};
use crate::netcore::{l2_normalize, l2_normalize_backward, Adam, FeatureExtractorConfig, IntrinsicExtractor, ParamStore};
use crate::templates::{adjust_template, generate_template, Template};

/// Template feature extractor that supplies the intrinsic targets.
///
/// A target is the unit-normalized extractor output for the class template
/// fitted to a ground-truth box at the origin with zero yaw, so it depends
/// only on class and size. The extractor learns through its own supervised
/// contrastive loss over those features (labels = class); the template loss
/// never sends gradient into it.
pub struct IntrinsicTargets {
    extractor: IntrinsicExtractor,
    store: ParamStore,
    adam: Adam,
    templates: Vec<Template>,
    tau: f64,
}

impl IntrinsicTargets {
    pub fn new(cfg: &FeatureExtractorConfig, template_points: usize, seed: u64, lr: f64, tau: f64) -> Result<Self> {
        let (extractor, store) = IntrinsicExtractor::seeded(cfg.clone(), seed)?;
        let templates = ObjectClass::ALL
            .iter()
            .map(|&c| generate_template(c, template_points, seed))
            .collect::<Result<Vec<_>>>()?;
        let adam = Adam::new(&store, lr);
        Ok(IntrinsicTargets {
            extractor,
            store,
            adam,
            templates,
            tau,
        })
    }

    fn canonical_cloud(&self, class: ObjectClass, dims: [f64; 3]) -> crate::pointops::PointCloud {
        let canonical = Box3D::new(0.0, 0.0, 0.0, dims[0], dims[1], dims[2], 0.0);
        adjust_template(&self.templates[class.index()], &canonical)
    }

    pub fn target(&self, class: ObjectClass, gt: &Box3D) -> Result<Vec<f64>> {
        let raw = self.extractor.infer(&self.store, &self.canonical_cloud(class, [gt.l, gt.w, gt.h]))?;
        l2_normalize(raw.as_slice().expect("contiguous"))
    }

    /// Targets for `gts`, computed before the extractor update. With
    /// `update`, one contrastive step is taken over the ground truths plus
    /// one canonical-size template per class. Returns (targets, loss).
    pub fn targets_and_update(&mut self, gts: &[(ObjectClass, Box3D)], update: bool) -> Result<(Vec<Vec<f64>>, f64)> {
        if !update {
            let t = gts.iter().map(|(c, b)| self.target(*c, b)).collect::<Result<Vec<_>>>()?;
            return Ok((t, 0.0));
        }
        let mut items: Vec<(ObjectClass, [f64; 3])> = gts.iter().map(|(c, b)| (*c, [b.l, b.w, b.h])).collect();
        items.extend(ObjectClass::ALL.iter().map(|&c| (c, c.canonical_dims())));
        let clouds: Vec<_> = items.iter().map(|(c, dims)| self.canonical_cloud(*c, *dims)).collect();
        let (raw, trace) = self.extractor.forward_batch(&self.store, &clouds)?;
        let raws: Vec<Vec<f64>> = raw.rows().into_iter().map(|r| r.to_vec()).collect();
        let feats = raws.iter().map(|r| l2_normalize(r)).collect::<Result<Vec<_>>>()?;
        let labels = items.iter().map(|(c, _)| c.id()).collect();
        let out = supcon_loss(&ContrastiveBatch::new(feats.clone(), labels, self.tau)?)?;
        let (loss, grads) = out.mean();
        let mut d_raw = ndarray::Array2::zeros(raw.raw_dim());
        for (i, (r, g)) in raws.iter().zip(&grads).enumerate() {
            let d = l2_normalize_backward(r, g)?;
            d_raw.row_mut(i).assign(&ndarray::ArrayView1::from(&d));
        }
        self.store.zero_grads();
        self.extractor.backward_batch(&mut self.store, &trace, &d_raw)?;
        if loss.is_finite() && self.store.grads_finite() {
            self.adam.step(&mut self.store);
        }
        Ok((feats[..gts.len()].to_vec(), loss))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_rpn: f64,
    pub l_conf: f64,
    pub l_reg: f64,
    pub l_temp: f64,
    pub l_contra: f64,
    pub total: f64,
}

impl EpochLoss {
    fn add(&mut self, o: &EpochLoss) {
        self.l_rpn += o.l_rpn;
        self.l_conf += o.l_conf;
        self.l_reg += o.l_reg;
        self.l_temp += o.l_temp;
        self.l_contra += o.l_contra;
        self.total += o.total;
    }

    fn scale(&mut self, s: f64) {
        self.l_rpn *= s;
        self.l_conf *= s;
        self.l_reg *= s;
        self.l_temp *= s;
        self.l_contra *= s;
        self.total *= s;
    }

    fn is_finite(&self) -> bool {
        [self.l_rpn, self.l_conf, self.l_reg, self.l_temp, self.l_contra, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub const LOSS_LOG_HEADER: &str = "epoch,l_rpn,l_conf,l_reg,l_temp,l_contra,total";

pub fn loss_log_csv(log: &[EpochLoss]) -> String {
    let mut s = format!("{LOSS_LOG_HEADER}\n");
    for e in log {
        writeln!(
            s,
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            e.epoch, e.l_rpn, e.l_conf, e.l_reg, e.l_temp, e.l_contra, e.total
        )
        .unwrap();
    }
    s
}

pub struct TrainOutcome {
    pub flags: AblationFlags,
    pub detector: Detector,
    pub log: Vec<EpochLoss>,
    /// Epoch at which a non-finite loss stopped training; the detector then
    /// holds the parameters from the start of that epoch.
    pub diverged: Option<usize>,
}

/// Everything the refinement losses need for one scene, shared by all variants.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefineBatch {
    /// Pooled, normalized points per sampled proposal.
    pub groups: Vec<Vec<crate::pointops::Point3>>,
    pub conf_targets: Vec<f64>,
    /// Rows that carry a regression target.
    pub reg_rows: Vec<usize>,
    pub reg_targets: Vec<[f64; 7]>,
    /// Intrinsic targets and matched IoUs per row; empty when no variant needs them.
    pub temp_targets: Vec<Vec<f64>>,
    pub temp_ious: Vec<f64>,
    pub num_foreground: usize,
    /// Rows entering the contrastive loss and their labels.
    pub contra_rows: Vec<usize>,
    pub contra_labels: Vec<u8>,
}

fn jittered_gt<R: Rng>(scene: &SceneSample, copies: usize, sxyz: f64, stheta: f64, rng: &mut R) -> Vec<Proposal> {
    let mut out = Vec::new();
    for (b, c) in scene.gt_boxes.iter().zip(&scene.gt_classes) {
        for _ in 0..copies {
            let mut n = || rng.sample::<f64, _>(StandardNormal);
            let bbox = Box3D::new(
                b.x + sxyz * n(),
                b.y + sxyz * n(),
                b.z + sxyz * n(),
                b.l,
                b.w,
                b.h,
                b.theta + stheta * n(),
            );
            out.push(Proposal { bbox, class: *c, score: 1.0 });
        }
    }
    out
}

struct Trainer<'a> {
    cfg: &'a Config,
    targets: Option<IntrinsicTargets>,
}

impl Trainer<'_> {
    fn refine_batch<R: Rng>(
        &mut self,
        det: &Detector,
        scene: &SceneSample,
        rpn_props: Vec<Proposal>,
        rng: &mut R,
    ) -> Result<RefineBatch> {
        let tc = &self.cfg.train;
        let mut props = if tc.jittered_only { Vec::new() } else { rpn_props };
        props.extend(jittered_gt(scene, tc.gt_proposal_copies, tc.jitter_xyz, tc.jitter_theta, rng));
        let boxes: Vec<Box3D> = props.iter().map(|p| p.bbox).collect();
        let matches = match_proposals_to_gt(&boxes, &scene.gt_boxes);
        // a proposal only counts as covering a ground truth of its own class
        let ious: Vec<f64> = matches
            .iter()
            .zip(&props)
            .map(|(m, p)| match m.gt_index {
                Some(g) if scene.gt_classes[g] == p.class => m.iou,
                _ => 0.0,
            })
            .collect();
        let sampled = sample_balanced(&ious, tc.assign.sample_size, tc.assign.positive_sample_iou, rng.random());
        let labels = label_proposals(&matches, &scene.gt_classes, &tc.assign);
        let sampled_boxes: Vec<Box3D> = sampled.iter().map(|&i| boxes[i]).collect();
        let groups = det.pool(&scene.cloud, &sampled_boxes);

        let mut batch = RefineBatch {
            groups,
            conf_targets: Vec::with_capacity(sampled.len()),
            reg_rows: Vec::new(),
            reg_targets: Vec::new(),
            temp_targets: Vec::new(),
            temp_ious: Vec::new(),
            num_foreground: 0,
            contra_rows: Vec::new(),
            contra_labels: Vec::new(),
        };
        let dim = self.cfg.refine.extractor.intrinsic_dim;
        let gt_targets = match self.targets.as_mut() {
            Some(t) => {
                let gts: Vec<(ObjectClass, Box3D)> =
                    scene.gt_classes.iter().copied().zip(scene.gt_boxes.iter().copied()).collect();
                t.targets_and_update(&gts, true)?.0
            }
            None => Vec::new(),
        };
        for (row, &i) in sampled.iter().enumerate() {
            let iou = ious[i];
            let target = confidence_label(iou);
            debug_assert!(target == (2.0 * iou - 0.5).clamp(0.0, 1.0));
            batch.conf_targets.push(target);
            let positive = iou >= tc.assign.positive_sample_iou;
            if positive {
                let g = matches[i].gt_index.expect("positive has a match");
                let gt = scene.gt_boxes[g].aligned_heading(boxes[i].theta);
                batch.reg_rows.push(row);
                batch.reg_targets.push(residual_to_frame(encode_box(&gt, &boxes[i]).to_array(), boxes[i].theta));
                batch.num_foreground += 1;
            }
            if self.targets.is_some() {
                match matches[i].gt_index {
                    Some(g) if iou > 0.0 => {
                        batch.temp_targets.push(gt_targets[g].clone());
                        batch.temp_ious.push(iou);
                    }
                    _ => {
                        batch.temp_targets.push(vec![0.0; dim]);
                        batch.temp_ious.push(0.0);
                    }
                }
            }
            if let Some(l) = labels[i].class.label_id() {
                if !batch.groups[row].is_empty() {
                    batch.contra_rows.push(row);
                    batch.contra_labels.push(l);
                }
            }
        }
        Ok(batch)
    }
}

struct Variant {
    flags: AblationFlags,
    store: ParamStore,
    adam: Adam,
    snapshot: ParamStore,
    log: Vec<EpochLoss>,
    running: EpochLoss,
    diverged: Option<usize>,
}

/// Refinement loss for one variant. With `backprop` set, gradients are
/// accumulated into `store`. The RPN term of the result is left at zero.
pub fn refine_loss(
    refiner: &Refiner,
    store: &mut ParamStore,
    flags: AblationFlags,
    batch: &RefineBatch,
    cfg: &Config,
    backprop: bool,
) -> Result<EpochLoss> {
    let aux = flags.use_tafe || flags.use_pscl;
    let out = refiner.forward(store, &batch.groups, aux, backprop)?;
    let probs = out.confidences();
    let conf = ConfTerms {
        probs: probs.clone(),
        targets: batch.conf_targets.clone(),
    };
    let reg = RegTerms {
        preds: batch.reg_rows.iter().map(|&r| out.deltas[r]).collect(),
        targets: batch.reg_targets.clone(),
    };
    let temp = flags.use_tafe.then(|| TemplateLossBatch {
        predicted: out.predicted.clone(),
        targets: batch.temp_targets.clone(),
        ious: batch.temp_ious.clone(),
        mu: cfg.refine.mu,
        num_foreground: batch.num_foreground,
    });
    let contra = if flags.use_pscl && batch.contra_rows.len() >= 2 {
        let feats = batch.contra_rows.iter().map(|&r| out.projected[r].clone()).collect();
        Some(ContrastiveBatch::new(feats, batch.contra_labels.clone(), cfg.refine.tau)?)
    } else {
        None
    };
    let loss = rcnn_loss(&conf, &reg, temp.as_ref(), contra.as_ref(), &cfg.train.weights)?;
    let w = &cfg.train.weights;
    let breakdown = EpochLoss {
        epoch: 0,
        l_rpn: 0.0,
        l_conf: loss.conf,
        l_reg: loss.reg,
        l_temp: loss.temp,
        l_contra: loss.contra,
        total: w.conf * loss.conf + w.reg * loss.reg + w.temp * loss.temp + w.contra * loss.contra,
    };
    if !backprop {
        return Ok(breakdown);
    }

    let p = probs.len();
    let mut grads = RefineGrads {
        d_conf_logits: (0..p).map(|i| loss.d_conf_probs[i] * probs[i] * (1.0 - probs[i])).collect(),
        d_deltas: vec![[0.0; 7]; p],
        d_predicted: None,
        d_projected: None,
    };
    for (k, &r) in batch.reg_rows.iter().enumerate() {
        grads.d_deltas[r] = loss.d_reg_preds[k];
    }
    if temp.is_some() {
        grads.d_predicted = Some(loss.d_predicted.clone());
    }
    if contra.is_some() {
        let mut d = vec![vec![0.0; cfg.refine.proj_dim]; p];
        for (k, &r) in batch.contra_rows.iter().enumerate() {
            d[r] = loss.d_features[k].clone();
        }
        grads.d_projected = Some(d);
    }
    refiner.backward(store, &out, &grads)?;
    Ok(breakdown)
}

/// RPN loss and gradients on one scene. Returns (loss, d_logits, d_deltas).
pub fn rpn_loss_and_grads(
    det: &Detector,
    scene: &SceneSample,
    out: &super::rpn::RpnOutput,
    cfg: &Config,
) -> Result<(f64, Vec<f64>, Vec<[f64; 7]>)> {
    let at = anchor_targets(
        &det.rpn.anchors,
        &det.rpn.anchor_classes,
        &scene.gt_boxes,
        &scene.gt_classes,
        &cfg.train.assign,
    );
    let probs = out.probs();
    let batch = AnchorBatch {
        probs: probs.clone(),
        labels: at.labels,
        reg_preds: out.deltas.clone(),
        reg_targets: at.targets,
    };
    let loss = rpn_loss(&batch)?;
    let d_logits = loss
        .d_probs
        .iter()
        .zip(&probs)
        .map(|(d, p)| d * p * (1.0 - p))
        .collect();
    Ok((loss.total, d_logits, loss.d_reg))
}

/// Trains one detector with the given module flags.
pub fn train(cfg: &Config, scenes: &[SceneSample], flags: AblationFlags) -> Result<TrainOutcome> {
    Ok(train_variants(cfg, scenes, &[flags])?.pop().expect("one variant"))
}

/// Trains several refinement variants against one shared RPN. Every
/// variant starts from the same initialization and sees the same scenes,
/// proposals and samples in the same order, so a variant's result is
/// identical to training it alone.
pub fn train_variants(cfg: &Config, scenes: &[SceneSample], variants: &[AblationFlags]) -> Result<Vec<TrainOutcome>> {
    cfg.validate()?;
    let tc = &cfg.train;
    let mut det = Detector::new(cfg, tc.seed);
    let mut rpn_adam = Adam::new(&det.rpn_store, tc.lr);
    let needs_targets = variants.iter().any(|f| f.use_tafe);
    let mut trainer = Trainer {
        cfg,
        targets: if needs_targets {
            Some(IntrinsicTargets::new(
                &cfg.refine.extractor,
                cfg.refine.template_points,
                cfg.refine.template_seed,
                tc.lr,
                cfg.refine.tau,
            )?)
        } else {
            None
        },
    };
    let mut vs: Vec<Variant> = variants
        .iter()
        .map(|&flags| Variant {
            flags,
            store: det.refine_store.clone(),
            adam: Adam::new(&det.refine_store, tc.lr),
            snapshot: det.refine_store.clone(),
            log: Vec::new(),
            running: EpochLoss::default(),
            diverged: None,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(0x7a1e));
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut rpn_diverged = None;

    'epochs: for epoch in 1..=tc.epochs {
        let rpn_snapshot = det.rpn_store.clone();
        for v in vs.iter_mut() {
            v.snapshot = v.store.clone();
            v.running = EpochLoss::default();
        }
        let mut rpn_sum = 0.0;
        order.shuffle(&mut rng);
        for &si in &order {
            let scene = &scenes[si];
            let mut scene_rng = ChaCha8Rng::seed_from_u64(rng.random());

            let out = det.rpn.forward(&det.rpn_store, &scene.cloud)?;
            let (l_rpn, d_logits, d_deltas) = rpn_loss_and_grads(&det, scene, &out, cfg)?;
            if !l_rpn.is_finite() {
                rpn_diverged = Some(epoch);
                det.rpn_store = rpn_snapshot;
                for v in vs.iter_mut().filter(|v| v.diverged.is_none()) {
                    v.store = v.snapshot.clone();
                    v.diverged = Some(epoch);
                }
                break 'epochs;
            }
            rpn_sum += l_rpn;
            let proposals = det.rpn.proposals(&out, cfg.rpn.train_nms, cfg.rpn.train_keep);
            det.rpn_store.zero_grads();
            det.rpn.backward(&mut det.rpn_store, &out, &d_logits, &d_deltas)?;
            rpn_adam.step(&mut det.rpn_store);

            let batch = trainer.refine_batch(&det, scene, proposals, &mut scene_rng)?;
            for v in vs.iter_mut().filter(|v| v.diverged.is_none()) {
                v.store.zero_grads();
                let l = refine_loss(&det.refiner, &mut v.store, v.flags, &batch, cfg, true)?;
                if !l.is_finite() || !v.store.grads_finite() {
                    v.store = v.snapshot.clone();
                    v.diverged = Some(epoch);
                    continue;
                }
                v.adam.step(&mut v.store);
                v.running.add(&l);
            }
        }
        let n = scenes.len().max(1) as f64;
        for v in vs.iter_mut().filter(|v| v.diverged.is_none()) {
            let mut e = v.running;
            e.scale(1.0 / n);
            e.l_rpn = rpn_sum / n;
            e.total += e.l_rpn;
            e.epoch = epoch;
            v.log.push(e);
        }
    }

    Ok(vs
        .into_iter()
        .map(|v| {
            let mut d = det.clone();
            d.refine_store = v.store;
            TrainOutcome {
                flags: v.flags,
                detector: d,
                log: v.log,
                diverged: v.diverged.or(rpn_diverged),
            }
        })
        .collect())
}

/// Fails with [`Error::Diverged`] when training stopped on a non-finite loss.
pub fn ensure_converged(outcome: &TrainOutcome) -> Result<()> {
    match outcome.diverged {
        Some(epoch) => Err(Error::Diverged { epoch }),
        None => Ok(()),
    }
}
