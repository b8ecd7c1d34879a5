//! Self-check suites: exact geometry against sampling oracles, NMS against
//! brute force, encode/decode roundtrips, finite-difference gradient checks,
//! contrastive separation and AP fixtures.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::class::ObjectClass;
use crate::eval::{average_precision, pr_curve, Detection, RecallMode};
use crate::geom::{bev_iou, decode_box, encode_box, iou3d, nms, wrap_angle, Box3D};
use crate::losses::{
    bce, confidence_label, focal_loss, rcnn_loss, rpn_loss, smooth_l1, supcon_loss, template_loss, AnchorBatch,
    ConfTerms, ContrastiveBatch, LossWeights, RegTerms, TemplateLossBatch,
};
use crate::netcore::{
    grad_check, grad_check_vector, l2_normalize, l2_normalize_backward, Adam, Dense, FeatureExtractorConfig,
    GradCheckOptions, GradCheckReport, IntrinsicExtractor, Mlp, ParamStore, SetAbstraction,
};
use crate::pipeline::config::{AblationFlags, Config};
use crate::pipeline::detector::Detector;
use crate::pipeline::scene::generate_scene;
use crate::pipeline::train::{refine_loss, rpn_loss_and_grads, RefineBatch};
use crate::pointops::{Point3, PointCloud};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

fn random_box<R: Rng>(rng: &mut R) -> Box3D {
    Box3D::new(
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(-0.5..0.5),
        rng.random_range(0.4..4.5),
        rng.random_range(0.4..2.0),
        rng.random_range(0.5..2.0),
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
}

/// Overlapping pair: the second box is the first moved by a fraction of its size.
pub fn random_box_pair<R: Rng>(rng: &mut R) -> (Box3D, Box3D) {
    let a = random_box(rng);
    let mut b = random_box(rng);
    b.x = a.x + rng.random_range(-0.6..0.6) * a.l;
    b.y = a.y + rng.random_range(-0.6..0.6) * a.w;
    b.z = a.z + rng.random_range(-0.5..0.5) * a.h;
    (a, b)
}

fn inside_bev(b: &Box3D, x: f64, y: f64) -> bool {
    let (s, c) = b.theta.sin_cos();
    let (dx, dy) = (x - b.x, y - b.y);
    (c * dx + s * dy).abs() <= b.l / 2.0 && (-s * dx + c * dy).abs() <= b.w / 2.0
}

fn union_extent(a: &Box3D, b: &Box3D) -> [f64; 4] {
    let ra = 0.5 * a.l.hypot(a.w);
    let rb = 0.5 * b.l.hypot(b.w);
    [
        (a.x - ra).min(b.x - rb),
        (a.x + ra).max(b.x + rb),
        (a.y - ra).min(b.y - rb),
        (a.y + ra).max(b.y + rb),
    ]
}

/// Midpoint-grid estimate of bird's-eye IoU.
pub fn bev_iou_oracle(a: &Box3D, b: &Box3D, n: usize) -> f64 {
    let [x0, x1, y0, y1] = union_extent(a, b);
    let (dx, dy) = ((x1 - x0) / n as f64, (y1 - y0) / n as f64);
    let (mut ia, mut ib, mut both) = (0usize, 0usize, 0usize);
    for i in 0..n {
        let x = x0 + (i as f64 + 0.5) * dx;
        for j in 0..n {
            let y = y0 + (j as f64 + 0.5) * dy;
            let (pa, pb) = (inside_bev(a, x, y), inside_bev(b, x, y));
            ia += pa as usize;
            ib += pb as usize;
            both += (pa && pb) as usize;
        }
    }
    let union = ia + ib - both;
    if union == 0 {
        0.0
    } else {
        both as f64 / union as f64
    }
}

/// Midpoint-grid estimate of 3D IoU. Both boxes are vertical prisms, so
/// counts over the product grid factor into footprint counts times
/// vertical counts.
pub fn iou3d_oracle(a: &Box3D, b: &Box3D, nxy: usize, nz: usize) -> f64 {
    let [x0, x1, y0, y1] = union_extent(a, b);
    let z0 = (a.z - a.h / 2.0).min(b.z - b.h / 2.0);
    let z1 = (a.z + a.h / 2.0).max(b.z + b.h / 2.0);
    let (dx, dy, dz) = ((x1 - x0) / nxy as f64, (y1 - y0) / nxy as f64, (z1 - z0) / nz as f64);
    let (mut za, mut zb, mut zboth) = (0usize, 0usize, 0usize);
    for k in 0..nz {
        let z = z0 + (k as f64 + 0.5) * dz;
        let (qa, qb) = ((z - a.z).abs() <= a.h / 2.0, (z - b.z).abs() <= b.h / 2.0);
        za += qa as usize;
        zb += qb as usize;
        zboth += (qa && qb) as usize;
    }
    let (mut ia, mut ib, mut both) = (0usize, 0usize, 0usize);
    for i in 0..nxy {
        let x = x0 + (i as f64 + 0.5) * dx;
        for j in 0..nxy {
            let y = y0 + (j as f64 + 0.5) * dy;
            let (pa, pb) = (inside_bev(a, x, y), inside_bev(b, x, y));
            ia += pa as usize;
            ib += pb as usize;
            both += (pa && pb) as usize;
        }
    }
    let inter = both * zboth;
    let union = ia * za + ib * zb - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Exact IoUs against the grid oracles over `pairs` random pairs.
pub fn check_iou(pairs: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_bev, mut worst_3d) = (0.0f64, 0.0f64);
    for _ in 0..pairs {
        let (a, b) = random_box_pair(&mut rng);
        worst_bev = worst_bev.max((bev_iou(&a, &b) - bev_iou_oracle(&a, &b, 400)).abs());
        worst_3d = worst_3d.max((iou3d(&a, &b) - iou3d_oracle(&a, &b, 400, 2000)).abs());
    }
    CheckResult::new(
        "iou_vs_grid_oracle",
        worst_bev <= 0.01 && worst_3d <= 0.01,
        format!("{pairs} pairs, max |Δ| bev {worst_bev:.5}, 3d {worst_3d:.5} (tolerance 0.01)"),
    )
}

/// Repeatedly keeps the best remaining box and deletes everything it overlaps.
pub fn nms_brute_force(boxes: &[Box3D], scores: &[f64], thr: f64, max_keep: usize) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut keep = Vec::new();
    while keep.len() < max_keep {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        keep.push(b);
        alive[b] = false;
        for i in 0..boxes.len() {
            if alive[i] && bev_iou(&boxes[b], &boxes[i]) > thr {
                alive[i] = false;
            }
        }
    }
    keep
}

pub fn check_nms(sets: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..sets {
        let n = rng.random_range(1..40);
        let boxes: Vec<Box3D> = (0..n)
            .map(|_| {
                let mut b = random_box(&mut rng);
                b.x *= 3.0;
                b.y *= 3.0;
                b
            })
            .collect();
        // coarse scores so ties occur
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
        let thr = rng.random_range(0.05..0.9);
        let keep = rng.random_range(1..50);
        if nms(&boxes, &scores, thr, keep) != nms_brute_force(&boxes, &scores, thr, keep) {
            mismatches += 1;
        }
    }
    CheckResult::new(
        "nms_vs_brute_force",
        mismatches == 0,
        format!("{sets} random sets, {mismatches} mismatches"),
    )
}

pub fn check_encoding(pairs: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let (gt, anchor) = random_box_pair(&mut rng);
        let back = decode_box(&encode_box(&gt, &anchor), &anchor);
        let (g, r) = (gt.to_array(), back.to_array());
        for k in 0..6 {
            worst = worst.max((g[k] - r[k]).abs());
        }
        worst = worst.max(wrap_angle(g[6] - r[6]).abs());
    }
    CheckResult::new(
        "encode_decode_roundtrip",
        worst < 1e-9,
        format!("{pairs} pairs, max field error {worst:.3e}"),
    )
}

fn report(name: &str, reports: &[(&str, GradCheckReport)]) -> CheckResult {
    let worst = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<String> = reports
        .iter()
        .filter(|(_, r)| !r.passed())
        .map(|(n, r)| match r.worst.first() {
            Some(w) => format!("{n} ({:.2e} at {}[{}])", r.max_rel_error, w.name, w.index),
            None => format!("{n} ({:.2e})", r.max_rel_error),
        })
        .collect();
    let detail = if failed.is_empty() {
        format!("{} checks, max relative error {worst:.2e}", reports.len())
    } else {
        format!("failed: {}", failed.join(", "))
    };
    CheckResult::new(name, failed.is_empty(), detail)
}

fn randv<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Finite-difference checks for every loss.
pub fn check_loss_gradients(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions::default();
    let mut out = Vec::new();

    // residuals kept away from the |r| = 1 kink
    let target = randv(&mut rng, 7, -1.0, 1.0);
    let pred: Vec<f64> = target
        .iter()
        .enumerate()
        .map(|(i, t)| t + if i % 2 == 0 { 0.4 } else { -1.7 })
        .collect();
    let g = smooth_l1(&pred, &target).unwrap().grad;
    out.push(("smooth_l1", grad_check_vector(|x| smooth_l1(x, &target).unwrap().loss, &pred, &g, opts)));

    for (p, y) in [(0.3, true), (0.8, false), (0.05, true)] {
        let g = [focal_loss(p, y).grad];
        out.push(("focal", grad_check_vector(|x| focal_loss(x[0], y).loss, &[p], &g, opts)));
    }
    for (p, y) in [(0.3, 0.0), (0.7, 0.4), (0.9, 1.0)] {
        let g = [bce(p, y).grad];
        out.push(("bce", grad_check_vector(|x| bce(x[0], y).loss, &[p], &g, opts)));
    }

    // contrastive: perturb raw vectors through the normalization
    let n = 8;
    let dim = 6;
    let raw: Vec<f64> = randv(&mut rng, n * dim, -1.0, 1.0);
    let labels: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
    let supcon_of = |x: &[f64]| -> (f64, Vec<f64>) {
        let feats: Vec<Vec<f64>> = x.chunks(dim).map(|c| l2_normalize(c).unwrap()).collect();
        let out = supcon_loss(&ContrastiveBatch::new(feats, labels.clone(), 0.5).unwrap()).unwrap();
        let mut g = Vec::new();
        for (c, gf) in x.chunks(dim).zip(&out.grad) {
            g.extend(l2_normalize_backward(c, gf).unwrap());
        }
        (out.loss, g)
    };
    let g = supcon_of(&raw).1;
    out.push(("supcon", grad_check_vector(|x| supcon_of(x).0, &raw, &g, opts)));

    let predicted: Vec<Vec<f64>> = (0..4).map(|_| randv(&mut rng, 5, -1.0, 1.0)).collect();
    let targets: Vec<Vec<f64>> = predicted.iter().map(|p| p.iter().map(|v| v + 0.3).collect()).collect();
    let ious = vec![0.9, 0.2, 0.7, 0.6];
    let temp_of = |x: &[f64]| {
        template_loss(&TemplateLossBatch {
            predicted: x.chunks(5).map(<[f64]>::to_vec).collect(),
            targets: targets.clone(),
            ious: ious.clone(),
            mu: 0.55,
            num_foreground: 3,
        })
        .unwrap()
    };
    let flat: Vec<f64> = predicted.concat();
    let g: Vec<f64> = temp_of(&flat).grad.concat();
    out.push(("template", grad_check_vector(|x| temp_of(x).loss, &flat, &g, opts)));

    // composite proposal loss over probabilities and residuals
    let m = 6;
    let labels = vec![1, 0, -1, 2, 0, 3];
    let reg_targets: Vec<[f64; 7]> = (0..m).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
    let probs = randv(&mut rng, m, 0.1, 0.9);
    let rpn_of = |x: &[f64]| {
        let reg_preds = (0..m)
            .map(|i| std::array::from_fn(|k| x[m + i * 7 + k]))
            .collect();
        rpn_loss(&AnchorBatch {
            probs: x[..m].to_vec(),
            labels: labels.clone(),
            reg_preds,
            reg_targets: reg_targets.clone(),
        })
        .unwrap()
    };
    let mut x = probs.clone();
    for t in &reg_targets {
        x.extend(t.iter().enumerate().map(|(k, v)| v + if k % 2 == 0 { 0.3 } else { -1.4 }));
    }
    let o = rpn_of(&x);
    let mut g = o.d_probs.clone();
    g.extend(o.d_reg.iter().flatten());
    out.push(("rpn_composite", grad_check_vector(|x| rpn_of(x).total, &x, &g, opts)));

    // weighted refinement composite over confidence and regression
    let weights = LossWeights { conf: 0.7, reg: 1.3, temp: 0.0, contra: 0.0 };
    let conf_t = vec![0.0, 0.5, 1.0];
    let reg_t: Vec<[f64; 7]> = vec![[0.1; 7], [-0.2; 7]];
    let rc_of = |x: &[f64]| {
        let conf = ConfTerms { probs: x[..3].to_vec(), targets: conf_t.clone() };
        let reg = RegTerms {
            preds: (0..2).map(|i| std::array::from_fn(|k| x[3 + i * 7 + k])).collect(),
            targets: reg_t.clone(),
        };
        rcnn_loss(&conf, &reg, None, None, &weights).unwrap()
    };
    let mut x = vec![0.2, 0.6, 0.7];
    x.extend([0.5; 7]);
    x.extend([-1.5; 7]);
    let o = rc_of(&x);
    let mut g = o.d_conf_probs.clone();
    g.extend(o.d_reg_preds.iter().flatten());
    out.push(("rcnn_composite", grad_check_vector(|x| rc_of(x).total, &x, &g, opts)));

    report("loss_gradients", &out)
}

/// `0.5·Σ (y ⊙ c)²` for a fixed random `c`; returns loss and dL/dy.
fn quad_loss(y: &Array2<f64>, c: &Array2<f64>) -> (f64, Array2<f64>) {
    let yc = y * c;
    (0.5 * yc.mapv(|v| v * v).sum(), &yc * c)
}

fn random_matrix<R: Rng>(rng: &mut R, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

/// Moves every bias off zero. Zero-valued inputs (an empty grid window, a
/// group center's own offset) otherwise land exactly on a ReLU kink.
fn offset_biases<R: Rng>(store: &mut ParamStore, rng: &mut R) {
    for p in store.params_mut() {
        if p.name.ends_with(".bias") {
            p.value.mapv_inplace(|v| v + rng.random_range(0.05..0.2) * if rng.random::<bool>() { 1.0 } else { -1.0 });
        }
    }
}

/// Finite-difference checks for every layer and for the full detector losses.
pub fn check_layer_gradients(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions { max_per_tensor: Some(40), seed, ..Default::default() };
    let mut out = Vec::new();

    {
        let mut store = ParamStore::new();
        let layer = Dense::new(&mut store, "dense", 5, 4, &mut rng);
        let x = random_matrix(&mut rng, 3, 5);
        let c = random_matrix(&mut rng, 3, 4);
        out.push((
            "dense",
            grad_check(
                &mut store,
                |s, acc| {
                    let y = layer.forward(s, &x).unwrap();
                    let (l, g) = quad_loss(&y, &c);
                    if acc {
                        layer.backward(s, &x, &g).unwrap();
                    }
                    l
                },
                opts,
            ),
        ));
    }
    {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "mlp", &[4, 8, 6, 3], false, &mut rng);
        offset_biases(&mut store, &mut rng);
        let x = random_matrix(&mut rng, 5, 4);
        let c = random_matrix(&mut rng, 5, 3);
        out.push((
            "mlp",
            grad_check(
                &mut store,
                |s, acc| {
                    let t = mlp.forward(s, &x).unwrap();
                    let (l, g) = quad_loss(t.output(), &c);
                    if acc {
                        mlp.backward(s, &t, &g).unwrap();
                    }
                    l
                },
                opts,
            ),
        ));
    }
    {
        let mut store = ParamStore::new();
        let sa = SetAbstraction::new(&mut store, "sa", 0.5, 8, &[3, 8, 6], &mut rng);
        offset_biases(&mut store, &mut rng);
        let cloud = PointCloud::new((0..40).map(|_| std::array::from_fn(|_| rng.random_range(-0.6..0.6))).collect());
        let centers: Vec<Point3> = cloud.points[..5].to_vec();
        let c = random_matrix(&mut rng, 5, 6);
        out.push((
            "set_abstraction",
            grad_check(
                &mut store,
                |s, acc| {
                    let (f, t) = sa.forward(s, &cloud, &centers).unwrap();
                    let (l, g) = quad_loss(&f, &c);
                    if acc {
                        sa.backward(s, &t, &g).unwrap();
                    }
                    l
                },
                opts,
            ),
        ));
    }
    {
        let cfg = FeatureExtractorConfig {
            m: 12,
            local_dim: 6,
            local_hidden: 8,
            fc_hidden: vec![16, 8],
            intrinsic_dim: 4,
            ..Default::default()
        };
        let (ex, mut store) = IntrinsicExtractor::seeded(cfg, seed).unwrap();
        offset_biases(&mut store, &mut rng);
        let cloud = PointCloud::new((0..60).map(|_| std::array::from_fn(|_| rng.random_range(-0.8..0.8))).collect());
        let c = randv(&mut rng, 4, -1.0, 1.0);
        out.push((
            "intrinsic_extractor",
            grad_check(
                &mut store,
                |s, acc| {
                    let (f, t) = ex.forward(s, &cloud).unwrap();
                    let l: f64 = f.iter().zip(&c).map(|(a, b)| 0.5 * (a * b).powi(2)).sum();
                    if acc {
                        let g = ndarray::Array1::from_iter(f.iter().zip(&c).map(|(a, b)| a * b * b));
                        ex.backward(s, &t, &g).unwrap();
                    }
                    l
                },
                opts,
            ),
        ));
    }
    {
        let v = randv(&mut rng, 6, -1.0, 1.0);
        let c = randv(&mut rng, 6, -1.0, 1.0);
        let f = |x: &[f64]| l2_normalize(x).unwrap().iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        let g = l2_normalize_backward(&v, &c).unwrap();
        out.push(("l2_normalize", grad_check_vector(f, &v, &g, GradCheckOptions::default())));
    }

    let cfg = small_pipeline_config();
    let scene = generate_scene(&cfg.scene, seed).expect("small scene");
    {
        let mut det = Detector::new(&cfg, seed);
        offset_biases(&mut det.rpn_store, &mut rng);
        let Detector { rpn, rpn_store, .. } = &mut det;
        let probe = Detector::new(&cfg, seed);
        out.push((
            "rpn_loss_through_mlp",
            grad_check(
                rpn_store,
                |s, acc| {
                    let o = rpn.forward(s, &scene.cloud).unwrap();
                    let (l, dl, dd) = rpn_loss_and_grads(&probe, &scene, &o, &cfg).unwrap();
                    if acc {
                        rpn.backward(s, &o, &dl, &dd).unwrap();
                    }
                    l
                },
                opts,
            ),
        ));
    }
    {
        let det = Detector::new(&cfg, seed);
        let batch = synthetic_refine_batch(&cfg, &mut rng);
        let mut store = det.refine_store.clone();
        offset_biases(&mut store, &mut rng);
        out.push((
            "rcnn_loss_through_heads",
            grad_check(
                &mut store,
                |s, acc| refine_loss(&det.refiner, s, AblationFlags::FULL, &batch, &cfg, acc).unwrap().total,
                opts,
            ),
        ));
    }
    report("layer_gradients", &out)
}

/// Small scene extents and narrow layers for fast gradient checks.
pub fn small_pipeline_config() -> Config {
    let mut cfg = Config::default();
    cfg.scene.x_range = [0.0, 12.0];
    cfg.scene.y_range = [-6.0, 6.0];
    cfg.scene.min_range = 2.0;
    cfg.scene.min_objects = 2;
    cfg.scene.max_objects = 3;
    cfg.rpn.hidden = 16;
    cfg.refine.encoder_dims = vec![8, 12];
    cfg.refine.head_hidden = 8;
    cfg.refine.proj_hidden = 8;
    cfg.refine.proj_dim = 10;
    cfg.refine.extractor.intrinsic_dim = 6;
    cfg
}

fn synthetic_refine_batch<R: Rng>(cfg: &Config, rng: &mut R) -> RefineBatch {
    let n = 6;
    let groups: Vec<Vec<Point3>> = (0..n)
        .map(|_| (0..10).map(|_| std::array::from_fn(|_| rng.random_range(-0.6..0.6))).collect())
        .collect();
    let dim = cfg.refine.extractor.intrinsic_dim;
    RefineBatch {
        groups,
        conf_targets: (0..n).map(|i| confidence_label(0.1 + 0.15 * i as f64)).collect(),
        reg_rows: vec![3, 4, 5],
        reg_targets: (0..3).map(|i| [0.5 * i as f64 - 0.4; 7]).collect(),
        temp_targets: (0..n).map(|_| randv(rng, dim, 1.5, 2.5)).collect(),
        temp_ious: vec![0.1, 0.3, 0.5, 0.6, 0.8, 0.9],
        num_foreground: 3,
        contra_rows: vec![0, 1, 2, 4, 5],
        contra_labels: vec![0, 0, 1, 2, 2],
    }
}

/// Optimizes the contrastive loss alone over free unit features and
/// returns (mean intra-class cosine, mean inter-class cosine).
pub fn supcon_separation(n: usize, classes: u8, dim: usize, steps: usize, tau: f64, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let id = store.add("features", random_matrix(&mut rng, n, dim));
    let labels: Vec<u8> = (0..n).map(|i| (i % classes as usize) as u8 + 1).collect();
    let mut adam = Adam::new(&store, 0.05);
    let feats = |s: &ParamStore| -> Vec<Vec<f64>> {
        s.value(id).rows().into_iter().map(|r| l2_normalize(&r.to_vec()).unwrap()).collect()
    };
    for _ in 0..steps {
        let f = feats(&store);
        let out = supcon_loss(&ContrastiveBatch::new(f, labels.clone(), tau).unwrap()).unwrap();
        store.zero_grads();
        let raw = store.value(id).clone();
        let g = store.grad_mut(id);
        for i in 0..n {
            let gi = l2_normalize_backward(&raw.row(i).to_vec(), &out.grad[i]).unwrap();
            g.row_mut(i).iter_mut().zip(gi).for_each(|(d, s)| *d = s);
        }
        adam.step(&mut store);
    }
    let f = feats(&store);
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            let c: f64 = f[i].iter().zip(&f[j]).map(|(a, b)| a * b).sum();
            if labels[i] == labels[j] {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                nx += 1;
            }
        }
    }
    (intra / ni as f64, inter / nx as f64)
}

pub fn check_supcon_separation(seed: u64) -> CheckResult {
    let (intra, inter) = supcon_separation(30, 3, 16, 200, 0.1, seed);
    CheckResult::new(
        "supcon_separation",
        intra - inter >= 0.3,
        format!("intra {intra:.3} − inter {inter:.3} = {:.3} (needs ≥ 0.3)", intra - inter),
    )
}

pub fn check_confidence_labels() -> CheckResult {
    let v = [confidence_label(0.25), confidence_label(0.5), confidence_label(0.75)];
    CheckResult::new(
        "confidence_label_exact",
        v == [0.0, 0.5, 1.0],
        format!("labels at 0.25/0.5/0.75 = {v:?}"),
    )
}

fn car(x: f64, score: Option<f64>) -> Detection {
    Detection::new(Box3D::new(x, 0.0, 0.0, 3.9, 1.6, 1.56, 0.0), ObjectClass::Car, score)
}

/// Straight-from-definition interpolated AP over explicit (precision, recall) pairs.
pub fn ap_by_definition(points: &[(f64, f64)], positions: &[f64]) -> f64 {
    positions
        .iter()
        .map(|&r| {
            let mut best = 0.0f64;
            for &(p, rc) in points {
                if rc >= r - 1e-12 && p > best {
                    best = p;
                }
            }
            best
        })
        .sum::<f64>()
        / positions.len() as f64
}

pub fn check_ap_fixtures() -> CheckResult {
    let mut problems = Vec::new();
    let gts = vec![car(5.0, None), car(15.0, None), car(25.0, None)];
    let dets = vec![car(5.0, Some(0.9)), car(40.0, Some(0.8)), car(15.0, Some(0.7))];
    let curve = pr_curve(&dets, &gts, ObjectClass::Car, 0.7);
    let table = [(1.0, 1.0 / 3.0), (0.5, 1.0 / 3.0), (2.0 / 3.0, 2.0 / 3.0)];
    let got: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.precision, p.recall)).collect();
    if got.len() != 3 || got.iter().zip(&table).any(|(a, b)| (a.0 - b.0).abs() > 1e-9 || (a.1 - b.1).abs() > 1e-9) {
        problems.push(format!("3-GT PR table {got:?}"));
    }
    let r11 = average_precision(&curve, RecallMode::R11).unwrap();
    let r11_def = ap_by_definition(&table, &RecallMode::R11.positions());
    let r40 = average_precision(&curve, RecallMode::R40).unwrap();
    let r40_def = ap_by_definition(&table, &RecallMode::R40.positions());
    if (r11 - r11_def).abs() > 1e-9 || (r40 - r40_def).abs() > 1e-9 {
        problems.push(format!("3-GT AP {r11} / {r40} vs definition {r11_def} / {r40_def}"));
    }
    let perfect: Vec<Detection> = gts.iter().map(|g| Detection { score: Some(0.5), ..*g }).collect();
    for mode in [RecallMode::R11, RecallMode::R40] {
        let p = average_precision(&pr_curve(&perfect, &gts, ObjectClass::Car, 0.7), mode);
        let e = average_precision(&pr_curve(&[], &gts, ObjectClass::Car, 0.7), mode);
        if p != Some(1.0) || e != Some(0.0) {
            problems.push(format!("{} perfect {p:?} empty {e:?}", mode.name()));
        }
    }
    CheckResult::new(
        "ap_fixtures",
        problems.is_empty(),
        if problems.is_empty() {
            format!("3-GT case R11 {r11:.6} R40 {r40:.6}; perfect 1.0, empty 0.0")
        } else {
            problems.join("; ")
        },
    )
}

/// Every suite run by `ifgkit check`.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    vec![
        check_iou(1000, seed),
        check_nms(500, seed),
        check_encoding(1000, seed),
        check_loss_gradients(seed),
        check_layer_gradients(seed),
        check_confidence_labels(),
        check_supcon_separation(seed),
        check_ap_fixtures(),
    ]
}
