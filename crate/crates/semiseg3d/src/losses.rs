//! Segmentation quality metric and training losses: per-class Dice score,
//! Generalized Dice loss, focal loss and their weighted combination.
//!
//! All functions take per-class probability masks and binary targets and
//! compute in f64. The `*_with_grad` variants return the analytic gradient
//! with respect to the prediction values, which the network backward pass
//! consumes.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::volume::MaskTensor;

/// Probability clamp applied inside log/power terms of the focal loss.
pub const PROB_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

impl Default for Reduction {
    fn default() -> Self {
        Reduction::Mean
    }
}

/// Loss hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Focal focusing parameter.
    pub gamma: f64,
    /// Per-class focal weight multipliers.
    pub alpha: Vec<f64>,
    pub w_gdl: f64,
    pub w_fl: f64,
    /// Small positive stabilizer used by the Dice score and the GDL.
    pub epsilon: f64,
    /// Focal reduction over voxels and classes.
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 2.0,
            alpha: vec![0.8, 0.9, 1.5],
            w_gdl: 1.0,
            w_fl: 0.8,
            epsilon: 1e-5,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.alpha.len() != num_classes {
            return Err(SegError::InvalidConfig(format!(
                "alpha has {} entries for {} classes",
                self.alpha.len(),
                num_classes
            )));
        }
        if self.alpha.iter().any(|&a| a < 0.0) || self.w_gdl < 0.0 || self.w_fl < 0.0 {
            return Err(SegError::InvalidConfig("loss weights must be >= 0".into()));
        }
        if self.gamma < 0.0 {
            return Err(SegError::InvalidConfig("gamma must be >= 0".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(SegError::InvalidConfig("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

fn check_pair(pred: &MaskTensor, target: &MaskTensor) -> Result<()> {
    pred.same_layout(target)
}

/// Per-class soft Dice with squared denominator terms:
/// `(2 * sum(p*t) + eps) / (sum(p^2) + sum(t^2) + eps)`.
pub fn dice_score(pred: &MaskTensor, target: &MaskTensor, epsilon: f64) -> Result<Vec<f64>> {
    check_pair(pred, target)?;
    let mut out = Vec::with_capacity(pred.num_classes());
    for c in 0..pred.num_classes() {
        let (p, t) = (pred.channel(c), target.channel(c));
        let mut inter = 0.0;
        let mut p2 = 0.0;
        let mut t2 = 0.0;
        for (&pv, &tv) in p.iter().zip(t.iter()) {
            inter += pv * tv;
            p2 += pv * pv;
            t2 += tv * tv;
        }
        out.push((2.0 * inter + epsilon) / (p2 + t2 + epsilon));
    }
    Ok(out)
}

/// Class weights `w_c = 1 / (sum(t_c))^2`, with absent classes capped at the
/// largest finite weight among present classes (0 when no class is present).
fn gdl_class_weights(target: &MaskTensor) -> Vec<f64> {
    let c = target.num_classes();
    let sums: Vec<f64> = (0..c).map(|i| target.channel(i).iter().sum()).collect();
    let max_finite = sums
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| 1.0 / (s * s))
        .fold(0.0f64, f64::max);
    sums.iter()
        .map(|&s| if s > 0.0 { 1.0 / (s * s) } else { max_finite })
        .collect()
}

struct GdlSums {
    weights: Vec<f64>,
    numerator: f64,   // sum_c w_c * sum(p*t)
    denominator: f64, // sum_c w_c * (sum(p^2) + sum(t^2))
}

fn gdl_sums(pred: &MaskTensor, target: &MaskTensor) -> GdlSums {
    let weights = gdl_class_weights(target);
    let mut numerator = 0.0;
    let mut denominator = 0.0;
    for c in 0..pred.num_classes() {
        let (p, t) = (pred.channel(c), target.channel(c));
        let mut inter = 0.0;
        let mut p2 = 0.0;
        let mut t2 = 0.0;
        for (&pv, &tv) in p.iter().zip(t.iter()) {
            inter += pv * tv;
            p2 += pv * pv;
            t2 += tv * tv;
        }
        numerator += weights[c] * inter;
        denominator += weights[c] * (p2 + t2);
    }
    GdlSums {
        weights,
        numerator,
        denominator,
    }
}

fn require_binary_target(target: &MaskTensor) -> Result<()> {
    if !target.binary {
        return Err(SegError::InvalidArgument(
            "loss target must be a binary mask".into(),
        ));
    }
    Ok(())
}

/// Generalized Dice loss, in `[0, 1]`:
/// `1 - (2 * N + eps) / (D + eps)` over class-weighted overlap sums.
pub fn generalized_dice_loss(pred: &MaskTensor, target: &MaskTensor, epsilon: f64) -> Result<f64> {
    check_pair(pred, target)?;
    require_binary_target(target)?;
    let s = gdl_sums(pred, target);
    Ok(1.0 - (2.0 * s.numerator + epsilon) / (s.denominator + epsilon))
}

/// GDL value plus its gradient with respect to the prediction values.
pub fn generalized_dice_loss_with_grad(
    pred: &MaskTensor,
    target: &MaskTensor,
    epsilon: f64,
) -> Result<(f64, Vec<f64>)> {
    check_pair(pred, target)?;
    require_binary_target(target)?;
    let s = gdl_sums(pred, target);
    let num = 2.0 * s.numerator + epsilon;
    let den = s.denominator + epsilon;
    let loss = 1.0 - num / den;
    let n = pred.voxels();
    let mut grad = vec![0.0f64; pred.values.len()];
    for c in 0..pred.num_classes() {
        let w = s.weights[c];
        let (p, t) = (pred.channel(c), target.channel(c));
        let g = &mut grad[c * n..(c + 1) * n];
        for i in 0..n {
            // d/dp of -(2N+eps)/(D+eps) with dN/dp = w*t, dD/dp = 2*w*p.
            g[i] = -(2.0 * w * t[i] * den - num * 2.0 * w * p[i]) / (den * den);
        }
    }
    Ok((loss, grad))
}

#[inline]
fn pow_gamma(x: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        1.0
    } else if gamma == 1.0 {
        x
    } else if gamma == 2.0 {
        x * x
    } else {
        x.powf(gamma)
    }
}

fn focal_scale(cfg: &LossConfig, pred: &MaskTensor) -> f64 {
    match cfg.reduction {
        Reduction::Mean => 1.0 / (pred.values.len() as f64),
        Reduction::Sum => 1.0,
    }
}

/// Focal loss over independent per-class channels:
/// `-sum alpha_c [ t (1-p)^g log p + (1-t) p^g log(1-p) ]`, reduced per
/// `cfg.reduction`. Probabilities are clamped to `[1e-6, 1 - 1e-6]`.
pub fn focal_loss(pred: &MaskTensor, target: &MaskTensor, cfg: &LossConfig) -> Result<f64> {
    check_pair(pred, target)?;
    require_binary_target(target)?;
    cfg.validate(pred.num_classes())?;
    let n = pred.voxels();
    let mut total = 0.0;
    for c in 0..pred.num_classes() {
        let alpha = cfg.alpha[c];
        let (p, t) = (pred.channel(c), target.channel(c));
        let mut acc = 0.0;
        for i in 0..n {
            let pc = p[i].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            acc += if t[i] != 0.0 {
                pow_gamma(1.0 - pc, cfg.gamma) * pc.ln()
            } else {
                pow_gamma(pc, cfg.gamma) * (1.0 - pc).ln()
            };
        }
        total += alpha * acc;
    }
    Ok(-total * focal_scale(cfg, pred))
}

/// Focal loss plus its gradient with respect to the prediction values.
///
/// Voxels whose raw probability lies outside the clamp interval get a zero
/// gradient (the clamp is flat there).
pub fn focal_loss_with_grad(
    pred: &MaskTensor,
    target: &MaskTensor,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    check_pair(pred, target)?;
    require_binary_target(target)?;
    cfg.validate(pred.num_classes())?;
    let n = pred.voxels();
    let scale = focal_scale(cfg, pred);
    let gamma = cfg.gamma;
    let mut total = 0.0;
    let mut grad = vec![0.0f64; pred.values.len()];
    for c in 0..pred.num_classes() {
        let alpha = cfg.alpha[c];
        let (p, t) = (pred.channel(c), target.channel(c));
        let g = &mut grad[c * n..(c + 1) * n];
        for i in 0..n {
            let raw = p[i];
            let pc = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let clamped = raw < PROB_CLAMP || raw > 1.0 - PROB_CLAMP;
            if t[i] != 0.0 {
                let one_m = 1.0 - pc;
                total += alpha * pow_gamma(one_m, gamma) * pc.ln();
                if !clamped {
                    let d = if gamma == 0.0 {
                        1.0 / pc
                    } else {
                        -gamma * pow_gamma(one_m, gamma - 1.0) * pc.ln()
                            + pow_gamma(one_m, gamma) / pc
                    };
                    g[i] = -alpha * d * scale;
                }
            } else {
                let one_m = 1.0 - pc;
                total += alpha * pow_gamma(pc, gamma) * one_m.ln();
                if !clamped {
                    let d = if gamma == 0.0 {
                        -1.0 / one_m
                    } else {
                        gamma * pow_gamma(pc, gamma - 1.0) * one_m.ln() - pow_gamma(pc, gamma) / one_m
                    };
                    g[i] = -alpha * d * scale;
                }
            }
        }
    }
    Ok((-total * scale, grad))
}

/// Weighted combination `w_gdl * GDL + w_fl * FL`.
pub fn combined_loss(pred: &MaskTensor, target: &MaskTensor, cfg: &LossConfig) -> Result<f64> {
    let gdl = generalized_dice_loss(pred, target, cfg.epsilon)?;
    let fl = focal_loss(pred, target, cfg)?;
    Ok(cfg.w_gdl * gdl + cfg.w_fl * fl)
}

/// Combined loss plus its gradient with respect to the prediction values.
pub fn combined_loss_with_grad(
    pred: &MaskTensor,
    target: &MaskTensor,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let (gdl, gdl_grad) = generalized_dice_loss_with_grad(pred, target, cfg.epsilon)?;
    let (fl, mut grad) = focal_loss_with_grad(pred, target, cfg)?;
    for (g, &dg) in grad.iter_mut().zip(gdl_grad.iter()) {
        *g = cfg.w_fl * *g + cfg.w_gdl * dg;
    }
    Ok((cfg.w_gdl * gdl + cfg.w_fl * fl, grad))
}
