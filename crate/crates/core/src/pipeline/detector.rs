//! The assembled two-stage detector, checkpoint I/O and inference.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::Config;
use super::refine::{pool_points, Refiner};
use super::rpn::Rpn;
use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::geom::{decode_box, nms, Box3D, RegressionTarget};
use crate::losses::sigmoid;
use crate::netcore::{checkpoint_from_bytes, checkpoint_to_bytes, ParamStore};
use crate::pointops::{Point3, PointCloud};

#[derive(Debug, Clone)]
pub struct Detector {
    pub cfg: Config,
    pub rpn: Rpn,
    pub refiner: Refiner,
    pub rpn_store: ParamStore,
    pub refine_store: ParamStore,
}

/// Residuals with the log-size terms clamped so decoding stays finite.
pub fn decode_clamped(t: &[f64; 7], reference: &Box3D) -> Box3D {
    let mut t = *t;
    for v in &mut t[3..6] {
        *v = v.clamp(-3.0, 3.0);
    }
    decode_box(&RegressionTarget::from_array(t), reference)
}

/// Rotates the planar offsets of a residual into the frame of a box with
/// yaw `theta`. The refinement stage sees points in the proposal frame, so
/// its targets are expressed there.
pub fn residual_to_frame(t: [f64; 7], theta: f64) -> [f64; 7] {
    let (s, c) = theta.sin_cos();
    let mut r = t;
    r[0] = c * t[0] + s * t[1];
    r[1] = -s * t[0] + c * t[1];
    r
}

pub fn residual_from_frame(t: [f64; 7], theta: f64) -> [f64; 7] {
    residual_to_frame(t, -theta)
}

/// Box from a proposal-frame residual.
pub fn decode_refined(t: &[f64; 7], proposal: &Box3D) -> Box3D {
    decode_clamped(&residual_from_frame(*t, proposal.theta), proposal)
}

impl Detector {
    /// Initializes both stages from `seed`. The refinement stage draws from
    /// its own stream, so variants sharing a seed start identically.
    pub fn new(cfg: &Config, seed: u64) -> Self {
        let mut rpn_store = ParamStore::new();
        let mut refine_store = ParamStore::new();
        let rpn = Rpn::new(&mut rpn_store, &cfg.rpn, &cfg.scene, &mut ChaCha8Rng::seed_from_u64(seed));
        let refiner = Refiner::new(
            &mut refine_store,
            &cfg.refine,
            &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_2e_f1ae),
        );
        Detector {
            cfg: cfg.clone(),
            rpn,
            refiner,
            rpn_store,
            refine_store,
        }
    }

    pub fn merged_store(&self) -> ParamStore {
        let mut all = ParamStore::new();
        for p in self.rpn_store.params().iter().chain(self.refine_store.params()) {
            all.add(p.name.clone(), p.value.clone());
        }
        all
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint_to_bytes(&self.merged_store())
    }

    /// Rebuilds the architecture from `cfg` and loads every tensor.
    pub fn from_checkpoint_bytes(cfg: &Config, bytes: &[u8]) -> Result<Detector> {
        let store = checkpoint_from_bytes(bytes)?;
        let mut det = Detector::new(cfg, 0);
        let expected = det.rpn_store.len() + det.refine_store.len();
        let matched = det.rpn_store.load_values_from(&store)? + det.refine_store.load_values_from(&store)?;
        if matched != expected || store.len() != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, {matched} of {expected} expected tensors matched",
                store.len()
            )));
        }
        Ok(det)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(cfg: &Config, path: &Path) -> Result<Detector> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Detector::from_checkpoint_bytes(cfg, &bytes)
    }

    pub fn pool(&self, cloud: &PointCloud, boxes: &[Box3D]) -> Vec<Vec<Point3>> {
        boxes
            .iter()
            .map(|b| pool_points(cloud, b, self.cfg.refine.pool_margin, self.cfg.refine.max_points))
            .collect()
    }

    /// RPN → NMS → refinement → class-wise final NMS. The auxiliary heads
    /// are not evaluated. Proposals that pool no points are dropped.
    pub fn infer(&self, cloud: &PointCloud) -> Result<Vec<Detection>> {
        let icfg = &self.cfg.infer;
        let out = self.rpn.forward(&self.rpn_store, cloud)?;
        let proposals = self.rpn.proposals(&out, icfg.nms_threshold, icfg.keep);
        let boxes: Vec<Box3D> = proposals.iter().map(|p| p.bbox).collect();
        let groups = self.pool(cloud, &boxes);
        let refined = self.refiner.forward(&self.refine_store, &groups, false, false)?;
        let mut cands: Vec<Detection> = Vec::new();
        for (i, p) in proposals.iter().enumerate() {
            if refined.empty[i] {
                continue;
            }
            let score = sigmoid(refined.conf_logits[i]);
            if score < icfg.score_threshold {
                continue;
            }
            cands.push(Detection::new(decode_refined(&refined.deltas[i], &p.bbox), p.class, Some(score)));
        }
        let mut dets = Vec::new();
        for class in crate::class::ObjectClass::ALL {
            let of_class: Vec<&Detection> = cands.iter().filter(|d| d.class == class).collect();
            let b: Vec<Box3D> = of_class.iter().map(|d| d.bbox).collect();
            let s: Vec<f64> = of_class.iter().map(|d| d.score_or_one()).collect();
            dets.extend(nms(&b, &s, icfg.final_nms, usize::MAX).into_iter().map(|i| *of_class[i]));
        }
        Ok(dets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::bev_iou;
    use crate::pipeline::scene::generate_scene;

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = Config::default();
        let det = Detector::new(&cfg, 5);
        let back = Detector::from_checkpoint_bytes(&cfg, &det.to_checkpoint_bytes()).unwrap();
        assert_eq!(back.rpn_store, det.rpn_store);
        assert_eq!(back.refine_store, det.refine_store);
        let mut other = cfg.clone();
        other.rpn.hidden = 32;
        assert!(Detector::from_checkpoint_bytes(&other, &det.to_checkpoint_bytes()).is_err());
    }

    #[test]
    fn frame_residual_roundtrip() {
        let gt = Box3D::new(10.3, -2.2, 0.1, 4.0, 1.7, 1.5, 0.9);
        let p = Box3D::new(10.0, -2.0, 0.0, 3.9, 1.6, 1.56, 0.7);
        let t = crate::geom::encode_box(&gt, &p).to_array();
        let back = decode_refined(&residual_to_frame(t, p.theta), &p);
        for (a, b) in back.to_array().iter().zip(gt.to_array()) {
            assert!((a - b).abs() < 1e-9);
        }
        // a shift along the proposal's length axis is a pure x offset in its frame
        let ahead = Box3D::new(p.x + 0.5 * p.theta.cos(), p.y + 0.5 * p.theta.sin(), p.z, p.l, p.w, p.h, p.theta);
        let local = residual_to_frame(crate::geom::encode_box(&ahead, &p).to_array(), p.theta);
        assert!(local[0] > 0.0 && local[1].abs() < 1e-12);
    }

    #[test]
    fn empty_scene_has_no_detections() {
        let det = Detector::new(&Config::default(), 1);
        assert!(det.infer(&PointCloud::default()).unwrap().is_empty());
    }

    #[test]
    fn final_nms_holds_per_class() {
        let cfg = Config::default();
        let det = Detector::new(&cfg, 2);
        let scene = generate_scene(&cfg.scene, 9).unwrap();
        let dets = det.infer(&scene.cloud).unwrap();
        for (i, a) in dets.iter().enumerate() {
            assert!(a.score.unwrap() >= 0.0 && a.score.unwrap() <= 1.0);
            for b in &dets[i + 1..] {
                if a.class == b.class {
                    assert!(bev_iou(&a.bbox, &b.bbox) <= 0.1 + 1e-12);
                }
            }
        }
    }
}
