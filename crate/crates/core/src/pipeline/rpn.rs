//! Bird's-eye-view grid proposal network: hand-built per-cell height
//! statistics over a 3×3 window feed a shared MLP that scores and regresses
//! six anchors (three classes × two yaws) per cell.

use ndarray::Array2;
use rand::Rng;

use super::config::{RpnConfig, SceneGenConfig};
use crate::class::ObjectClass;
use crate::error::Result;
use crate::geom::{decode_box, nms, Box3D, RegressionTarget};
use crate::losses::sigmoid;
use crate::netcore::{Mlp, MlpTrace, ParamStore};
use crate::pointops::PointCloud;

pub const CELL_STATS: usize = 4;
pub const WINDOW: usize = 9;
pub const ANCHORS_PER_CELL: usize = 6;
/// Logit plus seven box residuals.
pub const ANCHOR_OUTPUTS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub x0: f64,
    pub y0: f64,
    pub cell: f64,
    pub nx: usize,
    pub ny: usize,
    pub ground_z: f64,
}

impl BevGrid {
    pub fn new(scene: &SceneGenConfig, cell: f64) -> Self {
        BevGrid {
            x0: scene.x_range[0],
            y0: scene.y_range[0],
            cell,
            nx: ((scene.x_range[1] - scene.x_range[0]) / cell).round() as usize,
            ny: ((scene.y_range[1] - scene.y_range[0]) / cell).round() as usize,
            ground_z: scene.ground_z(),
        }
    }

    pub fn num_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        let ix = ((x - self.x0) / self.cell).floor();
        let iy = ((y - self.y0) / self.cell).floor();
        if ix < 0.0 || iy < 0.0 || ix >= self.nx as f64 || iy >= self.ny as f64 {
            return None;
        }
        Some(ix as usize * self.ny + iy as usize)
    }

    pub fn cell_center(&self, cell: usize) -> [f64; 2] {
        let (ix, iy) = (cell / self.ny, cell % self.ny);
        [self.x0 + (ix as f64 + 0.5) * self.cell, self.y0 + (iy as f64 + 0.5) * self.cell]
    }

    /// Per-cell `[ln(1+n), mean Δz, max Δz, var Δz]` with Δz measured from the ground.
    pub fn cell_stats(&self, cloud: &PointCloud) -> Vec<[f64; CELL_STATS]> {
        let mut acc = vec![(0usize, 0.0f64, f64::NEG_INFINITY, 0.0f64); self.num_cells()];
        for p in &cloud.points {
            if let Some(c) = self.cell_of(p[0], p[1]) {
                let dz = p[2] - self.ground_z;
                let a = &mut acc[c];
                a.0 += 1;
                a.1 += dz;
                a.2 = a.2.max(dz);
                a.3 += dz * dz;
            }
        }
        acc.into_iter()
            .map(|(n, s, mx, s2)| {
                if n == 0 {
                    return [0.0; CELL_STATS];
                }
                let nf = n as f64;
                let mean = s / nf;
                [(1.0 + nf).ln(), mean, mx, (s2 / nf - mean * mean).max(0.0)]
            })
            .collect()
    }

    /// Cells whose 3×3 window contains at least one point, in index order.
    pub fn active_cells(&self, stats: &[[f64; CELL_STATS]]) -> Vec<usize> {
        (0..self.num_cells())
            .filter(|&c| self.window(c).into_iter().flatten().any(|n| stats[n][0] > 0.0))
            .collect()
    }

    fn window(&self, cell: usize) -> [Option<usize>; WINDOW] {
        let (ix, iy) = ((cell / self.ny) as isize, (cell % self.ny) as isize);
        let mut out = [None; WINDOW];
        let mut k = 0;
        for dx in -1..=1 {
            for dy in -1..=1 {
                let (jx, jy) = (ix + dx, iy + dy);
                if jx >= 0 && jy >= 0 && (jx as usize) < self.nx && (jy as usize) < self.ny {
                    out[k] = Some(jx as usize * self.ny + jy as usize);
                }
                k += 1;
            }
        }
        out
    }

    pub fn window_features(&self, stats: &[[f64; CELL_STATS]], cell: usize) -> [f64; WINDOW * CELL_STATS] {
        let mut f = [0.0; WINDOW * CELL_STATS];
        for (k, n) in self.window(cell).into_iter().enumerate() {
            if let Some(n) = n {
                f[k * CELL_STATS..(k + 1) * CELL_STATS].copy_from_slice(&stats[n]);
            }
        }
        f
    }
}

#[derive(Debug, Clone)]
pub struct Rpn {
    pub cfg: RpnConfig,
    pub grid: BevGrid,
    pub mlp: Mlp,
    pub anchors: Vec<Box3D>,
    pub anchor_classes: Vec<ObjectClass>,
}

/// Raw per-anchor outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct RpnOutput {
    pub logits: Vec<f64>,
    pub deltas: Vec<[f64; 7]>,
    active: Vec<usize>,
    trace: MlpTrace,
}

impl RpnOutput {
    pub fn probs(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| sigmoid(l)).collect()
    }

    pub fn num_active_cells(&self) -> usize {
        self.active.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: Box3D,
    pub class: ObjectClass,
    pub score: f64,
}

fn anchor_layout(k: usize) -> (ObjectClass, usize) {
    (ObjectClass::ALL[k / 2], k % 2)
}

impl Rpn {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &RpnConfig, scene: &SceneGenConfig, rng: &mut R) -> Self {
        let grid = BevGrid::new(scene, cfg.cell_size);
        let mlp = Mlp::new(
            store,
            "rpn.mlp",
            &[WINDOW * CELL_STATS, cfg.hidden, ANCHORS_PER_CELL * ANCHOR_OUTPUTS],
            false,
            rng,
        );
        let bias = mlp.layers.last().expect("two layers").bias;
        let prior_logit = -((1.0 - cfg.prior) / cfg.prior).ln();
        for a in 0..ANCHORS_PER_CELL {
            store.value_mut(bias)[[0, a * ANCHOR_OUTPUTS]] = prior_logit;
        }
        let mut anchors = Vec::with_capacity(grid.num_cells() * ANCHORS_PER_CELL);
        let mut anchor_classes = Vec::with_capacity(anchors.capacity());
        for c in 0..grid.num_cells() {
            let [x, y] = grid.cell_center(c);
            for k in 0..ANCHORS_PER_CELL {
                let (class, yaw) = anchor_layout(k);
                let [l, w, h] = class.canonical_dims();
                anchors.push(Box3D::new(x, y, grid.ground_z + h / 2.0, l, w, h, cfg.anchor_yaws[yaw]));
                anchor_classes.push(class);
            }
        }
        Rpn {
            cfg: cfg.clone(),
            grid,
            mlp,
            anchors,
            anchor_classes,
        }
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// Only cells with points in their window are pushed through the MLP;
    /// all others share the output of one zero row.
    pub fn forward(&self, store: &ParamStore, cloud: &PointCloud) -> Result<RpnOutput> {
        let stats = self.grid.cell_stats(cloud);
        let active = self.grid.active_cells(&stats);
        let d = WINDOW * CELL_STATS;
        let mut input = Array2::zeros((active.len() + 1, d));
        for (r, &c) in active.iter().enumerate() {
            let f = self.grid.window_features(&stats, c);
            input.row_mut(r).iter_mut().zip(f).for_each(|(dst, v)| *dst = v);
        }
        let trace = self.mlp.forward(store, &input)?;
        let out = trace.output();
        let zero_row = active.len();
        let mut row_of = vec![zero_row; self.grid.num_cells()];
        for (r, &c) in active.iter().enumerate() {
            row_of[c] = r;
        }
        let n = self.num_anchors();
        let mut logits = Vec::with_capacity(n);
        let mut deltas = Vec::with_capacity(n);
        for c in 0..self.grid.num_cells() {
            let row = out.row(row_of[c]);
            for k in 0..ANCHORS_PER_CELL {
                let o = k * ANCHOR_OUTPUTS;
                logits.push(row[o]);
                let mut dl = [0.0; 7];
                for j in 0..7 {
                    dl[j] = row[o + 1 + j];
                }
                deltas.push(dl);
            }
        }
        Ok(RpnOutput {
            logits,
            deltas,
            active,
            trace,
        })
    }

    /// Backpropagates per-anchor logit and residual gradients.
    pub fn backward(&self, store: &mut ParamStore, out: &RpnOutput, d_logits: &[f64], d_deltas: &[[f64; 7]]) -> Result<()> {
        let zero_row = out.active.len();
        let mut row_of = vec![zero_row; self.grid.num_cells()];
        for (r, &c) in out.active.iter().enumerate() {
            row_of[c] = r;
        }
        let mut g = Array2::zeros(out.trace.output().raw_dim());
        for c in 0..self.grid.num_cells() {
            let r = row_of[c];
            for k in 0..ANCHORS_PER_CELL {
                let a = c * ANCHORS_PER_CELL + k;
                let o = k * ANCHOR_OUTPUTS;
                g[[r, o]] += d_logits[a];
                for j in 0..7 {
                    g[[r, o + 1 + j]] += d_deltas[a][j];
                }
            }
        }
        self.mlp.backward(store, &out.trace, &g)?;
        Ok(())
    }

    /// Top-scoring anchors decoded into boxes and thinned by NMS.
    pub fn proposals(&self, out: &RpnOutput, nms_threshold: f64, keep: usize) -> Vec<Proposal> {
        let probs = out.probs();
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
        order.truncate(self.cfg.pre_nms_top);
        let cands: Vec<Proposal> = order
            .into_iter()
            .map(|a| {
                let mut t = out.deltas[a];
                for v in &mut t[3..6] {
                    *v = v.clamp(-3.0, 3.0);
                }
                Proposal {
                    bbox: decode_box(&RegressionTarget::from_array(t), &self.anchors[a]),
                    class: self.anchor_classes[a],
                    score: probs[a],
                }
            })
            .collect();
        let boxes: Vec<Box3D> = cands.iter().map(|p| p.bbox).collect();
        let scores: Vec<f64> = cands.iter().map(|p| p.score).collect();
        nms(&boxes, &scores, nms_threshold, keep).into_iter().map(|i| cands[i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_scene_cfg() -> SceneGenConfig {
        SceneGenConfig {
            x_range: [0.0, 8.0],
            y_range: [-4.0, 4.0],
            ..Default::default()
        }
    }

    fn build() -> (Rpn, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rpn = Rpn::new(&mut store, &RpnConfig::default(), &small_scene_cfg(), &mut rng);
        (rpn, store)
    }

    #[test]
    fn grid_and_anchor_layout() {
        let (rpn, _) = build();
        assert_eq!((rpn.grid.nx, rpn.grid.ny), (20, 20));
        assert_eq!(rpn.num_anchors(), 400 * 6);
        assert_eq!(rpn.grid.cell_of(0.0, -4.0), Some(0));
        assert_eq!(rpn.grid.cell_of(8.0, 0.0), None);
        assert_eq!(rpn.grid.cell_center(0), [0.2, -3.8]);
        assert_eq!(rpn.anchor_classes[6 * 7 + 3], ObjectClass::Pedestrian);
        assert!((rpn.anchors[1].theta - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!((rpn.anchors[0].z - (-1.5 + 0.78)).abs() < 1e-12);
    }

    #[test]
    fn empty_cloud_gives_uniform_prior_scores() {
        let (rpn, store) = build();
        let out = rpn.forward(&store, &PointCloud::default()).unwrap();
        assert_eq!(out.num_active_cells(), 0);
        let p = out.probs();
        assert!(p.iter().all(|&v| (v - p[0]).abs() < 1e-15));
        assert!((p[0] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn cell_statistics() {
        let grid = BevGrid::new(&small_scene_cfg(), 0.4);
        let cloud = PointCloud::new(vec![[0.1, -3.9, -1.5], [0.2, -3.9, -0.5], [5.0, 0.0, 0.0]]);
        let s = grid.cell_stats(&cloud);
        let c = s[0];
        assert!((c[0] - 3f64.ln()).abs() < 1e-12);
        assert!((c[1] - 0.5).abs() < 1e-12);
        assert!((c[2] - 1.0).abs() < 1e-12);
        assert!((c[3] - 0.25).abs() < 1e-12);
        let active = grid.active_cells(&s);
        assert!(active.contains(&0) && active.contains(&1) && active.contains(&grid.ny));
        let f = grid.window_features(&s, grid.ny + 1);
        assert_eq!(&f[0..4], &c);
    }

    #[test]
    fn proposals_are_thinned() {
        let (rpn, store) = build();
        let cloud = PointCloud::new((0..50).map(|i| [2.0 + 0.05 * i as f64, 0.3, -1.0]).collect());
        let out = rpn.forward(&store, &cloud).unwrap();
        let props = rpn.proposals(&out, 0.8, 128);
        assert!(!props.is_empty() && props.len() <= 128);
        for w in props.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }
}
