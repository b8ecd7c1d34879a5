//! Loss functions with analytic gradients: Smooth L1, focal, BCE, the
//! IoU-to-confidence mapping, supervised contrastive loss over proposal
//! embeddings, the template feature loss, and the composite RPN / refinement
//! objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped into `[PROB_EPS, 1 − PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Loss value with the gradient w.r.t. a scalar input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarLoss {
    pub loss: f64,
    pub grad: f64,
}

/// Loss value with the gradient w.r.t. a vector input.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            expected: format!("length {a}"),
            actual: format!("length {b}"),
        });
    }
    Ok(())
}

/// Summed elementwise Smooth L1 (β = 1).
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> Result<VectorLoss> {
    same_len(pred.len(), target.len())?;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d.abs() < 1.0 {
                loss += 0.5 * d * d;
            } else {
                loss += d.abs() - 0.5;
            }
            d.clamp(-1.0, 1.0)
        })
        .collect();
    Ok(VectorLoss { loss, grad })
}

fn clamp_prob(p: f64) -> (f64, bool) {
    let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (c, c == p)
}

/// Binary focal loss with α = 0.25, γ = 2.
pub fn focal_loss(p: f64, label: bool) -> ScalarLoss {
    focal_loss_with(p, label, FOCAL_ALPHA, FOCAL_GAMMA)
}

/// `−α_t (1 − p_t)^γ ln p_t` and its derivative w.r.t. `p`.
pub fn focal_loss_with(p: f64, label: bool, alpha: f64, gamma: f64) -> ScalarLoss {
    let (p, free) = clamp_prob(p);
    let (pt, alpha_t, sign) = if label { (p, alpha, 1.0) } else { (1.0 - p, 1.0 - alpha, -1.0) };
    let q = 1.0 - pt;
    let loss = -alpha_t * q.powf(gamma) * pt.ln();
    let d_pt = alpha_t * (gamma * q.powf(gamma - 1.0) * pt.ln() - q.powf(gamma) / pt);
    ScalarLoss {
        loss,
        grad: if free { sign * d_pt } else { 0.0 },
    }
}

/// Binary cross entropy against a soft target `y ∈ [0, 1]`.
pub fn bce(p: f64, y: f64) -> ScalarLoss {
    let (p, free) = clamp_prob(p);
    let loss = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    let grad = if free { (p - y) / (p * (1.0 - p)) } else { 0.0 };
    ScalarLoss { loss, grad }
}

/// Confidence target from IoU: `min(1, max(0, 2·IoU − 0.5))`.
pub fn confidence_label(iou: f64) -> f64 {
    (2.0 * iou - 0.5).clamp(0.0, 1.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Embeddings and class labels (0 = background) for the contrastive loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub tau: f64,
}

impl ContrastiveBatch {
    /// Validates unit norms (±1e-9), label count and a positive temperature.
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<u8>, tau: f64) -> Result<Self> {
        let batch = ContrastiveBatch { features, labels, tau };
        batch.check_shape()?;
        for (i, f) in batch.features.iter().enumerate() {
            let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("feature {i} has norm {n}, expected 1")));
            }
        }
        Ok(batch)
    }

    fn check_shape(&self) -> Result<()> {
        same_len(self.features.len(), self.labels.len())?;
        if self.features.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "contrastive loss needs at least 2 samples, got {}",
                self.features.len()
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {}", self.tau)));
        }
        let d = self.features[0].len();
        for f in &self.features {
            same_len(d, f.len())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupConOutput {
    /// Sum over anchors.
    pub loss: f64,
    /// d loss / d features.
    pub grad: Vec<Vec<f64>>,
    /// Anchors with at least one positive.
    pub contributing: usize,
    /// Anchors with no same-class partner (contribute 0).
    pub skipped: usize,
}

impl SupConOutput {
    /// Loss averaged over contributing anchors, with the matching gradient.
    pub fn mean(&self) -> (f64, Vec<Vec<f64>>) {
        let n = self.contributing.max(1) as f64;
        let grad = self.grad.iter().map(|g| g.iter().map(|v| v / n).collect()).collect();
        (self.loss / n, grad)
    }
}

/// Supervised contrastive loss summed over anchors `i`:
/// `−1/|P(i)| Σ_{p∈P(i)} log( exp(f_i·f_p/τ) / Σ_{a≠i} exp(f_i·f_a/τ) )`.
pub fn supcon_loss(batch: &ContrastiveBatch) -> Result<SupConOutput> {
    batch.check_shape()?;
    let n = batch.features.len();
    let d = batch.features[0].len();
    let f = &batch.features;
    let inv_tau = 1.0 / batch.tau;

    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s = f[i].iter().zip(&f[j]).map(|(a, b)| a * b).sum::<f64>() * inv_tau;
            sim[i * n + j] = s;
            sim[j * n + i] = s;
        }
    }

    let mut loss = 0.0;
    let mut grad = vec![vec![0.0; d]; n];
    let mut contributing = 0;
    let mut skipped = 0;
    let mut coef = vec![0.0; n];
    for i in 0..n {
        let positives = (0..n).filter(|&p| p != i && batch.labels[p] == batch.labels[i]).count();
        if positives == 0 {
            skipped += 1;
            continue;
        }
        contributing += 1;
        let row = &sim[i * n..(i + 1) * n];
        let max = (0..n).filter(|&a| a != i).map(|a| row[a]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).filter(|&a| a != i).map(|a| (row[a] - max).exp()).sum();
        let lse = max + denom.ln();
        let inv_p = 1.0 / positives as f64;
        let mut term = 0.0;
        for a in 0..n {
            if a == i {
                coef[a] = 0.0;
                continue;
            }
            let softmax = (row[a] - max).exp() / denom;
            let positive = batch.labels[a] == batch.labels[i];
            if positive {
                term += row[a] - lse;
            }
            // d L_i / d s_ia
            coef[a] = softmax - if positive { inv_p } else { 0.0 };
        }
        loss += -inv_p * term;
        for a in 0..n {
            let c = coef[a] * inv_tau;
            if c == 0.0 {
                continue;
            }
            for k in 0..d {
                grad[i][k] += c * f[a][k];
                grad[a][k] += c * f[i][k];
            }
        }
    }
    Ok(SupConOutput {
        loss,
        grad,
        contributing,
        skipped,
    })
}

/// Predicted proposal features, template targets and matched IoUs.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateLossBatch {
    pub predicted: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub ious: Vec<f64>,
    /// Participation threshold μ.
    pub mu: f64,
    /// Normalizer N_p.
    pub num_foreground: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateLossOutput {
    pub loss: f64,
    pub grad: Vec<Vec<f64>>,
    pub participating: usize,
}

/// `(1/N_p) Σ_i 𝟙(IoU_i > μ) SmoothL1(α_i − α_i^t)`; zero when nobody participates.
pub fn template_loss(batch: &TemplateLossBatch) -> Result<TemplateLossOutput> {
    same_len(batch.predicted.len(), batch.targets.len())?;
    same_len(batch.predicted.len(), batch.ious.len())?;
    if !(batch.mu > 0.0 && batch.mu < 1.0) {
        return Err(Error::InvalidArgument(format!("mu must lie in (0, 1), got {}", batch.mu)));
    }
    let mut sum = 0.0;
    let mut participating = 0;
    let mut grad: Vec<Vec<f64>> = batch.predicted.iter().map(|p| vec![0.0; p.len()]).collect();
    for i in 0..batch.predicted.len() {
        if batch.ious[i] > batch.mu {
            let sl = smooth_l1(&batch.predicted[i], &batch.targets[i])?;
            sum += sl.loss;
            grad[i] = sl.grad;
            participating += 1;
        }
    }
    if participating == 0 {
        return Ok(TemplateLossOutput {
            loss: 0.0,
            grad,
            participating,
        });
    }
    let norm = batch.num_foreground.max(1) as f64;
    for g in grad.iter_mut() {
        g.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(TemplateLossOutput {
        loss: sum / norm,
        grad,
        participating,
    })
}

/// Per-anchor predictions and targets for the proposal network loss.
/// `labels`: −1 ignored, 0 background, c ≥ 1 foreground of class c.
/// Regression entries are read only where `labels[i] >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorBatch {
    pub probs: Vec<f64>,
    pub labels: Vec<i32>,
    pub reg_preds: Vec<[f64; 7]>,
    pub reg_targets: Vec<[f64; 7]>,
}

impl AnchorBatch {
    pub fn num_foreground(&self) -> usize {
        self.labels.iter().filter(|&&l| l >= 1).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpnLossOutput {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub num_foreground: usize,
    pub d_probs: Vec<f64>,
    pub d_reg: Vec<[f64; 7]>,
}

/// `(1/N_fg)[Σ focal + Σ_fg SmoothL1]`, normalized by 1 when there is no foreground.
pub fn rpn_loss(batch: &AnchorBatch) -> Result<RpnLossOutput> {
    let n = batch.probs.len();
    same_len(n, batch.labels.len())?;
    same_len(n, batch.reg_preds.len())?;
    same_len(n, batch.reg_targets.len())?;
    let num_fg = batch.num_foreground();
    let norm = num_fg.max(1) as f64;
    let mut cls = 0.0;
    let mut reg = 0.0;
    let mut d_probs = vec![0.0; n];
    let mut d_reg = vec![[0.0; 7]; n];
    for i in 0..n {
        let label = batch.labels[i];
        if label < 0 {
            continue;
        }
        let fl = focal_loss(batch.probs[i], label >= 1);
        cls += fl.loss;
        d_probs[i] = fl.grad / norm;
        if label >= 1 {
            let sl = smooth_l1(&batch.reg_preds[i], &batch.reg_targets[i])?;
            reg += sl.loss;
            for k in 0..7 {
                d_reg[i][k] = sl.grad[k] / norm;
            }
        }
    }
    Ok(RpnLossOutput {
        total: (cls + reg) / norm,
        cls: cls / norm,
        reg: reg / norm,
        num_foreground: num_fg,
        d_probs,
        d_reg,
    })
}

/// Confidence predictions and their soft targets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfTerms {
    pub probs: Vec<f64>,
    pub targets: Vec<f64>,
}

/// Box residual predictions and targets for the positive proposals.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegTerms {
    pub preds: Vec<[f64; 7]>,
    pub targets: Vec<[f64; 7]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub conf: f64,
    pub reg: f64,
    pub temp: f64,
    pub contra: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            conf: 1.0,
            reg: 1.0,
            temp: 1.0,
            contra: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RcnnLossOutput {
    pub total: f64,
    /// Mean BCE over proposals.
    pub conf: f64,
    /// Mean Smooth L1 over regression entries.
    pub reg: f64,
    pub temp: f64,
    /// Contrastive loss averaged over contributing anchors.
    pub contra: f64,
    pub d_conf_probs: Vec<f64>,
    pub d_reg_preds: Vec<[f64; 7]>,
    pub d_predicted: Vec<Vec<f64>>,
    pub d_features: Vec<Vec<f64>>,
}

/// Weighted sum of the four refinement losses. Absent template/contrastive
/// batches contribute zero and produce empty gradients.
pub fn rcnn_loss(
    conf: &ConfTerms,
    reg: &RegTerms,
    template: Option<&TemplateLossBatch>,
    contrastive: Option<&ContrastiveBatch>,
    weights: &LossWeights,
) -> Result<RcnnLossOutput> {
    same_len(conf.probs.len(), conf.targets.len())?;
    same_len(reg.preds.len(), reg.targets.len())?;

    let nc = conf.probs.len().max(1) as f64;
    let mut l_conf = 0.0;
    let d_conf_probs = conf
        .probs
        .iter()
        .zip(&conf.targets)
        .map(|(&p, &y)| {
            let b = bce(p, y);
            l_conf += b.loss;
            weights.conf * b.grad / nc
        })
        .collect();
    l_conf /= nc;

    let nr = reg.preds.len().max(1) as f64;
    let mut l_reg = 0.0;
    let mut d_reg_preds = Vec::with_capacity(reg.preds.len());
    for (p, t) in reg.preds.iter().zip(&reg.targets) {
        let sl = smooth_l1(p, t)?;
        l_reg += sl.loss;
        let mut g = [0.0; 7];
        for k in 0..7 {
            g[k] = weights.reg * sl.grad[k] / nr;
        }
        d_reg_preds.push(g);
    }
    l_reg /= nr;

    let (l_temp, d_predicted) = match template {
        Some(b) => {
            let out = template_loss(b)?;
            let g = out
                .grad
                .into_iter()
                .map(|g| g.into_iter().map(|v| weights.temp * v).collect())
                .collect();
            (out.loss, g)
        }
        None => (0.0, Vec::new()),
    };

    let (l_contra, d_features) = match contrastive {
        Some(b) => {
            let (l, g) = supcon_loss(b)?.mean();
            let g = g
                .into_iter()
                .map(|g| g.into_iter().map(|v| weights.contra * v).collect())
                .collect();
            (l, g)
        }
        None => (0.0, Vec::new()),
    };

    Ok(RcnnLossOutput {
        total: weights.conf * l_conf + weights.reg * l_reg + weights.temp * l_temp + weights.contra * l_contra,
        conf: l_conf,
        reg: l_reg,
        temp: l_temp,
        contra: l_contra,
        d_conf_probs,
        d_reg_preds,
        d_predicted,
        d_features,
    })
}
