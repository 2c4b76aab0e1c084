//! Training objectives with exact analytic gradients.
//!
//! All mask gradients are taken with respect to the mask *logits* (the
//! sigmoid is folded in), response gradients with respect to the response
//! logits, and the contrastive gradient with respect to the anchor token
//! vector. Each gradient is verified against central finite differences in
//! the tests and the acceptance suite.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::WeightMap;
use crate::maskgeo::BinaryMask;
use crate::model::{ForwardTrace, SoftMask, SsegToken};
use crate::rng::subseed;
use crate::tokenbank::TokenBank;

/// Probabilities are clamped to this range before any logarithm.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("dimension mismatch: {a_w}x{a_h} vs {b_w}x{b_h}")]
    DimensionMismatch {
        a_w: usize,
        a_h: usize,
        b_w: usize,
        b_h: usize,
    },
    #[error("class index {index} out of range for {n_classes} classes")]
    BadClassIndex { index: usize, n_classes: usize },
    #[error("non-finite loss: {0}")]
    NonFinite(String),
}

/// Weights and numerical knobs shared by all objectives.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Language-loss weight in the labeled objective.
    pub alpha: f64,
    /// Unlabeled-branch weight in the combined objective.
    pub sigma: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub dice_eps: f64,
    pub weight_floor_eps: f64,
    /// Use the unnormalized weighted BCE sum instead of the
    /// weight-normalized mean in the unlabeled segmentation loss.
    pub eq7_literal: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            sigma: 0.001,
            tau: 0.07,
            dice_eps: 1e-6,
            weight_floor_eps: 1e-8,
            eq7_literal: false,
        }
    }
}

/// A scalar objective with named parts and the gradient buffers the
/// training step consumes.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub total: f64,
    pub parts: BTreeMap<String, f64>,
    pub d_mask_logits: Vec<f64>,
    pub d_response_logits: Vec<f64>,
}

fn check_dims(pred: &SoftMask, target: &BinaryMask) -> Result<(), LossError> {
    if pred.width != target.width || pred.height != target.height {
        return Err(LossError::DimensionMismatch {
            a_w: pred.width,
            a_h: pred.height,
            b_w: target.width,
            b_h: target.height,
        });
    }
    Ok(())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn pixel_bce(p: f64, y: f64) -> f64 {
    let p = clamp_prob(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Mean binary cross-entropy; gradient with respect to the mask logits is
/// `(p - y) / N` per pixel.
pub fn bce(pred: &SoftMask, target: &BinaryMask) -> Result<(f64, Vec<f64>), LossError> {
    check_dims(pred, target)?;
    let n = pred.data.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.data.len()];
    for (i, (&p, &t)) in pred.data.iter().zip(&target.data).enumerate() {
        let y = t as u8 as f64;
        loss += pixel_bce(p, y);
        grad[i] = (p - y) / n;
    }
    Ok((loss / n, grad))
}

/// Soft Dice loss `1 - (2*sum(w p y) + eps) / (sum(w p) + sum(w y) + eps)`;
/// `weights` default to 1. The gradient flows through the quotient and the
/// sigmoid.
pub fn dice_loss(
    pred: &SoftMask,
    target: &BinaryMask,
    weights: Option<&WeightMap>,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>), LossError> {
    check_dims(pred, target)?;
    if let Some(w) = weights {
        if w.width != pred.width || w.height != pred.height {
            return Err(LossError::DimensionMismatch {
                a_w: pred.width,
                a_h: pred.height,
                b_w: w.width,
                b_h: w.height,
            });
        }
    }
    let eps = cfg.dice_eps;
    let w_at = |i: usize| weights.map_or(1.0, |w| w.weights[i]);

    let mut sum_py = 0.0;
    let mut sum_p = 0.0;
    let mut sum_y = 0.0;
    for (i, (&p, &t)) in pred.data.iter().zip(&target.data).enumerate() {
        let (w, y) = (w_at(i), t as u8 as f64);
        sum_py += w * p * y;
        sum_p += w * p;
        sum_y += w * y;
    }
    let numer = 2.0 * sum_py + eps;
    let denom = sum_p + sum_y + eps;
    let loss = 1.0 - numer / denom;

    let mut grad = vec![0.0; pred.data.len()];
    for (i, (&p, &t)) in pred.data.iter().zip(&target.data).enumerate() {
        let (w, y) = (w_at(i), t as u8 as f64);
        // d loss / d p_i through the quotient rule
        let dp = w * (numer - 2.0 * y * denom) / (denom * denom);
        grad[i] = dp * p * (1.0 - p);
    }
    Ok((loss, grad))
}

/// Softmax cross-entropy over the response logits; gradient is
/// `softmax - onehot`.
pub fn softmax_ce(logits: &[f64], target_index: usize) -> Result<(f64, Vec<f64>), LossError> {
    if target_index >= logits.len() {
        return Err(LossError::BadClassIndex {
            index: target_index,
            n_classes: logits.len(),
        });
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
    let loss = m + z.ln() - logits[target_index];
    let mut grad: Vec<f64> = logits.iter().map(|&l| (l - m).exp() / z).collect();
    grad[target_index] -= 1.0;
    Ok((loss, grad))
}

/// Labeled objective: `alpha * CE + BCE + Dice`, computed from raw
/// prediction buffers. The `ce` part in `parts` is the unweighted CE.
pub fn labeled_loss_parts(
    soft_mask: &SoftMask,
    response_logits: &[f64],
    gt_mask: &BinaryMask,
    gt_class_index: usize,
    cfg: &LossConfig,
) -> Result<LossValue, LossError> {
    let (bce_loss, bce_grad) = bce(soft_mask, gt_mask)?;
    let (dice, dice_grad) = dice_loss(soft_mask, gt_mask, None, cfg)?;
    let (ce, ce_grad) = softmax_ce(response_logits, gt_class_index)?;

    let total = cfg.alpha * ce + bce_loss + dice;
    let d_mask_logits: Vec<f64> = bce_grad
        .iter()
        .zip(&dice_grad)
        .map(|(&a, &b)| a + b)
        .collect();
    let d_response_logits: Vec<f64> = ce_grad.iter().map(|&g| cfg.alpha * g).collect();

    let mut parts = BTreeMap::new();
    parts.insert("ce".to_string(), ce);
    parts.insert("bce".to_string(), bce_loss);
    parts.insert("dice".to_string(), dice);
    Ok(LossValue {
        total,
        parts,
        d_mask_logits,
        d_response_logits,
    })
}

/// Labeled objective evaluated on a forward trace.
pub fn labeled_loss(
    trace: &ForwardTrace,
    gt_mask: &BinaryMask,
    gt_class_index: usize,
    cfg: &LossConfig,
) -> Result<LossValue, LossError> {
    labeled_loss_parts(
        &trace.soft_mask,
        &trace.response_logits,
        gt_mask,
        gt_class_index,
        cfg,
    )
}

/// Weighted pseudo-label segmentation loss and its mask-logit gradient.
#[derive(Debug, Clone)]
pub struct SegLoss {
    pub total: f64,
    pub bce_part: f64,
    pub dice_part: f64,
    pub d_mask_logits: Vec<f64>,
}

/// Per-pixel weighted BCE plus weighted Dice against a pseudo mask. The
/// default form normalizes the BCE term by the weight mass so the loss
/// magnitude is image-size independent and reduces exactly to
/// `bce + dice_loss` at unit weights; `cfg.eq7_literal` switches to the
/// unnormalized weighted sum. Weights are constants: no gradient flows
/// into them.
pub fn unlabeled_seg_loss(
    pred: &SoftMask,
    pseudo: &BinaryMask,
    weights: &WeightMap,
    cfg: &LossConfig,
) -> Result<SegLoss, LossError> {
    check_dims(pred, pseudo)?;
    if weights.width != pred.width || weights.height != pred.height {
        return Err(LossError::DimensionMismatch {
            a_w: pred.width,
            a_h: pred.height,
            b_w: weights.width,
            b_h: weights.height,
        });
    }

    let weight_mass: f64 = weights.weights.iter().sum();
    let norm = if cfg.eq7_literal {
        1.0
    } else {
        weight_mass.max(cfg.weight_floor_eps)
    };

    let mut bce_part = 0.0;
    let mut d_mask_logits = vec![0.0; pred.data.len()];
    for (i, (&p, &t)) in pred.data.iter().zip(&pseudo.data).enumerate() {
        let (w, y) = (weights.weights[i], t as u8 as f64);
        bce_part += w * pixel_bce(p, y);
        d_mask_logits[i] = w * (p - y) / norm;
    }
    bce_part /= norm;

    let (dice_part, dice_grad) = dice_loss(pred, pseudo, Some(weights), cfg)?;
    for (g, &d) in d_mask_logits.iter_mut().zip(&dice_grad) {
        *g += d;
    }

    Ok(SegLoss {
        total: bce_part + dice_part,
        bce_part,
        dice_part,
        d_mask_logits,
    })
}

/// Token-level contrastive loss over a set of anchors.
#[derive(Debug, Clone)]
pub struct ContrastiveLoss {
    pub total: f64,
    /// Anchors that found both a positive and at least one negative.
    pub n_active: usize,
    /// Per-anchor gradient with respect to the anchor vector; `None` for
    /// anchors that contributed nothing.
    pub d_anchor_vecs: Vec<Option<Vec<f64>>>,
}

fn cosine_and_grad(v: &[f64], u: &[f64]) -> (f64, Vec<f64>) {
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nv < 1e-30 || nu < 1e-30 {
        return (0.0, vec![0.0; v.len()]);
    }
    let dot: f64 = v.iter().zip(u).map(|(&a, &b)| a * b).sum();
    let cos = dot / (nv * nu);
    let grad = v
        .iter()
        .zip(u)
        .map(|(&vk, &uk)| uk / (nv * nu) - dot * vk / (nv * nv * nv * nu))
        .collect();
    (cos, grad)
}

/// InfoNCE over cosine similarity: for each anchor, one seeded positive of
/// the same class and up to `n_neg` negatives of other classes come from
/// the bank (which stays constant under the gradient). Anchors lacking a
/// positive or a negative are skipped.
pub fn contrastive_loss(
    anchors: &[SsegToken],
    bank: &TokenBank,
    n_neg: usize,
    seed: u64,
    cfg: &LossConfig,
) -> ContrastiveLoss {
    let tau = cfg.tau;
    let mut total = 0.0;
    let mut n_active = 0;
    let mut d_anchor_vecs = Vec::with_capacity(anchors.len());

    for (i, anchor) in anchors.iter().enumerate() {
        let (positive, negatives) = bank.sample(anchor.class_id, n_neg, subseed(seed, i as u64));
        let (positive, has_neg) = match (positive, negatives.is_empty()) {
            (Some(p), false) => (p, true),
            _ => {
                d_anchor_vecs.push(None);
                continue;
            }
        };
        debug_assert!(has_neg);

        let v = &anchor.vec;
        let (cos_pos, dcos_pos) = cosine_and_grad(v, &positive);
        let s_pos = cos_pos / tau;
        let neg_terms: Vec<(f64, Vec<f64>)> =
            negatives.iter().map(|u| cosine_and_grad(v, u)).collect();

        let mut m = s_pos;
        for (cos_neg, _) in &neg_terms {
            m = m.max(cos_neg / tau);
        }
        let e_pos = (s_pos - m).exp();
        let mut z = e_pos;
        for (cos_neg, _) in &neg_terms {
            z += (cos_neg / tau - m).exp();
        }
        total += m + z.ln() - s_pos;
        n_active += 1;

        let p_pos = e_pos / z;
        let mut grad = vec![0.0; v.len()];
        let coef_pos = (p_pos - 1.0) / tau;
        for (g, &d) in grad.iter_mut().zip(&dcos_pos) {
            *g += coef_pos * d;
        }
        for (cos_neg, dcos_neg) in &neg_terms {
            let p_neg = (cos_neg / tau - m).exp() / z;
            let coef = p_neg / tau;
            for (g, &d) in grad.iter_mut().zip(dcos_neg) {
                *g += coef * d;
            }
        }
        d_anchor_vecs.push(Some(grad));
    }

    ContrastiveLoss {
        total,
        n_active,
        d_anchor_vecs,
    }
}

/// Combined objective `L = L_labeled + sigma * (L_unlabeled_seg + L_token)`.
pub fn total_loss(
    labeled_total: f64,
    unlabeled_seg: f64,
    unlabeled_token: f64,
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    let total = labeled_total + cfg.sigma * (unlabeled_seg + unlabeled_token);
    if !total.is_finite() {
        return Err(LossError::NonFinite(format!(
            "labeled {labeled_total}, unlabeled_seg {unlabeled_seg}, token {unlabeled_token}"
        )));
    }
    Ok(total)
}
