//! Point-pooled proposal refinement: a shared point encoder with max pooling
//! feeds confidence, box-residual, intrinsic-feature and projection heads.

use ndarray::{Array2, Axis};
use rand::Rng;

use super::config::RefineConfig;
use crate::error::Result;
use crate::geom::Box3D;
use crate::losses::sigmoid;
use crate::netcore::{l2_normalize, l2_normalize_backward, segment_max, stack_groups, Mlp, MlpTrace, ParamStore};
use crate::pointops::{points_in_box, Point3, PointCloud};

#[derive(Debug, Clone)]
pub struct Refiner {
    pub encoder: Mlp,
    pub conf: Mlp,
    pub reg: Mlp,
    pub feat: Mlp,
    pub proj: Mlp,
}

/// Points near a proposal, in its frame and divided by its dimensions.
/// Large sets are strided down to `max_points`.
pub fn pool_points(cloud: &PointCloud, proposal: &Box3D, margin: f64, max_points: usize) -> Vec<Point3> {
    let idx = points_in_box(cloud, proposal, margin);
    let n = idx.len();
    let pick: Vec<usize> = if n > max_points {
        (0..max_points).map(|i| idx[i * n / max_points]).collect()
    } else {
        idx
    };
    pick.into_iter()
        .map(|i| {
            let l = proposal.to_local(cloud.points[i]);
            [l[0] / proposal.l, l[1] / proposal.w, l[2] / proposal.h]
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RefineOutput {
    pub conf_logits: Vec<f64>,
    pub deltas: Vec<[f64; 7]>,
    /// Predicted intrinsic features; empty unless auxiliary heads ran.
    pub predicted: Vec<Vec<f64>>,
    /// Unit-norm projections; empty unless auxiliary heads ran. Proposals
    /// without points get the first basis vector.
    pub projected: Vec<Vec<f64>>,
    /// Proposals that pooled no points and fell back to a zero feature.
    pub empty: Vec<bool>,
    trace: Option<RefineTrace>,
}

impl RefineOutput {
    pub fn confidences(&self) -> Vec<f64> {
        self.conf_logits.iter().map(|&l| sigmoid(l)).collect()
    }
}

#[derive(Debug, Clone)]
struct RefineTrace {
    encoder: MlpTrace,
    argmax: Array2<usize>,
    /// Row of the pooled feature matrix for each non-empty proposal.
    nonempty: Vec<usize>,
    conf: MlpTrace,
    reg: MlpTrace,
    aux: Option<(MlpTrace, MlpTrace)>,
}

/// Gradients arriving at the head outputs.
#[derive(Debug, Clone, Default)]
pub struct RefineGrads {
    pub d_conf_logits: Vec<f64>,
    pub d_deltas: Vec<[f64; 7]>,
    pub d_predicted: Option<Vec<Vec<f64>>>,
    /// Gradient with respect to the normalized projections.
    pub d_projected: Option<Vec<Vec<f64>>>,
}

fn to_rows(v: &[Vec<f64>], cols: usize) -> Array2<f64> {
    let mut a = Array2::zeros((v.len(), cols));
    for (r, row) in v.iter().enumerate() {
        a.row_mut(r).iter_mut().zip(row).for_each(|(d, s)| *d = *s);
    }
    a
}

impl Refiner {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &RefineConfig, rng: &mut R) -> Self {
        let mut enc = vec![3];
        enc.extend(&cfg.encoder_dims);
        let d = cfg.feature_dim();
        let h = cfg.head_hidden;
        Refiner {
            encoder: Mlp::new(store, "refine.encoder", &enc, true, rng),
            conf: Mlp::new(store, "refine.conf", &[d, h, 1], false, rng),
            reg: Mlp::new(store, "refine.reg", &[d, h, 7], false, rng),
            feat: Mlp::new(store, "refine.feat", &[d, h, cfg.extractor.intrinsic_dim], false, rng),
            proj: Mlp::new(store, "refine.proj", &[d, cfg.proj_hidden, cfg.proj_dim], false, rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.out_dim()
    }

    /// Runs every head on pooled groups. The feature-prediction and
    /// projection heads only run when `aux` is set. `keep_trace` retains
    /// what [`Refiner::backward`] needs.
    pub fn forward(&self, store: &ParamStore, groups: &[Vec<Point3>], aux: bool, keep_trace: bool) -> Result<RefineOutput> {
        let p = groups.len();
        let d = self.feature_dim();
        let nonempty: Vec<usize> = (0..p).filter(|&i| !groups[i].is_empty()).collect();
        let kept: Vec<Vec<Point3>> = nonempty.iter().map(|&i| groups[i].clone()).collect();
        let (rows, starts) = stack_groups(&kept);
        let enc = self.encoder.forward(store, &rows)?;
        let (pooled, argmax) = segment_max(enc.output(), &starts);
        let mut feats = Array2::zeros((p, d));
        for (r, &i) in nonempty.iter().enumerate() {
            feats.row_mut(i).assign(&pooled.row(r));
        }
        let conf = self.conf.forward(store, &feats)?;
        let reg = self.reg.forward(store, &feats)?;
        let conf_logits = conf.output().column(0).to_vec();
        let deltas = reg
            .output()
            .rows()
            .into_iter()
            .map(|r| {
                let mut t = [0.0; 7];
                t.iter_mut().zip(r).for_each(|(d, s)| *d = *s);
                t
            })
            .collect();
        let (predicted, projected, aux_trace) = if aux {
            let ft = self.feat.forward(store, &feats)?;
            let pt = self.proj.forward(store, &feats)?;
            let predicted = ft.output().rows().into_iter().map(|r| r.to_vec()).collect();
            let projected = pt
                .output()
                .rows()
                .into_iter()
                .enumerate()
                .map(|(i, r)| {
                    if groups[i].is_empty() {
                        let mut e = vec![0.0; r.len()];
                        e[0] = 1.0;
                        Ok(e)
                    } else {
                        l2_normalize(r.as_slice().expect("row-major"))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            (predicted, projected, Some((ft, pt)))
        } else {
            (Vec::new(), Vec::new(), None)
        };
        let empty = (0..p).map(|i| groups[i].is_empty()).collect();
        let trace = keep_trace.then(|| RefineTrace {
            encoder: enc,
            argmax,
            nonempty,
            conf,
            reg,
            aux: aux_trace,
        });
        Ok(RefineOutput {
            conf_logits,
            deltas,
            predicted,
            projected,
            empty,
            trace,
        })
    }

    pub fn backward(&self, store: &mut ParamStore, out: &RefineOutput, grads: &RefineGrads) -> Result<()> {
        let trace = out.trace.as_ref().expect("forward was run with keep_trace");
        let p = out.conf_logits.len();
        let g_conf = Array2::from_shape_vec((p, 1), grads.d_conf_logits.clone()).expect("one logit per proposal");
        let mut d_feats = self.conf.backward(store, &trace.conf, &g_conf)?;
        let g_reg = to_rows(&grads.d_deltas.iter().map(|t| t.to_vec()).collect::<Vec<_>>(), 7);
        d_feats += &self.reg.backward(store, &trace.reg, &g_reg)?;
        if let Some((ft, pt)) = &trace.aux {
            if let Some(dp) = &grads.d_predicted {
                d_feats += &self.feat.backward(store, ft, &to_rows(dp, self.feat.out_dim()))?;
            }
            if let Some(dz) = &grads.d_projected {
                let raw = pt.output();
                let d_raw = raw
                    .rows()
                    .into_iter()
                    .zip(dz)
                    .zip(&out.empty)
                    .map(|((r, g), &empty)| {
                        if empty {
                            Ok(vec![0.0; g.len()])
                        } else {
                            l2_normalize_backward(r.as_slice().expect("row-major"), g)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                d_feats += &self.proj.backward(store, pt, &to_rows(&d_raw, self.proj.out_dim()))?;
            }
        }
        let d_pooled = d_feats.select(Axis(0), &trace.nonempty);
        let mut g_enc = Array2::zeros(trace.encoder.output().raw_dim());
        for ((grp, ch), &row) in trace.argmax.indexed_iter() {
            g_enc[[row, ch]] += d_pooled[[grp, ch]];
        }
        self.encoder.backward(store, &trace.encoder, &g_enc)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build() -> (Refiner, ParamStore, RefineConfig) {
        let cfg = RefineConfig::default();
        let mut store = ParamStore::new();
        let r = Refiner::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        (r, store, cfg)
    }

    fn groups() -> Vec<Vec<Point3>> {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g: Vec<Vec<Point3>> = (0..3)
            .map(|_| (0..20).map(|_| [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)]).collect())
            .collect();
        g.push(Vec::new());
        g
    }

    #[test]
    fn output_shapes_and_unit_projection() {
        let (r, store, cfg) = build();
        let out = r.forward(&store, &groups(), true, false).unwrap();
        assert_eq!(out.conf_logits.len(), 4);
        assert_eq!(out.deltas.len(), 4);
        assert!(out.predicted.iter().all(|v| v.len() == cfg.extractor.intrinsic_dim));
        assert!(out.projected.iter().all(|v| v.len() == cfg.proj_dim));
        for v in &out.projected {
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert_eq!(out.empty, vec![false, false, false, true]);
        let lean = r.forward(&store, &groups(), false, false).unwrap();
        assert!(lean.predicted.is_empty() && lean.projected.is_empty());
        assert_eq!(lean.conf_logits, out.conf_logits);
    }

    #[test]
    fn pooling_normalizes_by_dims() {
        let b = Box3D::new(10.0, 2.0, 0.0, 4.0, 2.0, 1.0, 0.0);
        let cloud = PointCloud::new(vec![[11.0, 2.5, 0.25], [30.0, 0.0, 0.0]]);
        let g = pool_points(&cloud, &b, 1.2, 16);
        assert_eq!(g.len(), 1);
        assert!((g[0][0] - 0.25).abs() < 1e-12 && (g[0][1] - 0.25).abs() < 1e-12 && (g[0][2] - 0.25).abs() < 1e-12);
        let dense = PointCloud::new((0..100).map(|i| [10.0 + 0.01 * i as f64, 2.0, 0.0]).collect());
        assert_eq!(pool_points(&dense, &b, 1.2, 16).len(), 16);
    }
}
