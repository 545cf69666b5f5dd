//! Segmentation losses over 2-class logits `[N, 2, H, W]` and binary targets.
//!
//! Tversky and Dice pool their soft confusion counts over the whole batch.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Graph, NodeId, Scalar, Tensor};

pub const DEFAULT_SMOOTH: f64 = 1e-6;
pub const DEFAULT_GAMMA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Dice,
    Focal,
    Lovasz,
    Tversky,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSpec {
    pub variant: LossKind,
    /// False-positive weight.
    pub alpha: f64,
    /// False-negative weight.
    pub beta: f64,
    pub gamma: f64,
    pub smooth_eps: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self::tversky(0.6, 0.4)
    }
}

impl LossSpec {
    pub fn of(variant: LossKind) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn tversky(alpha: f64, beta: f64) -> Self {
        Self {
            variant: LossKind::Tversky,
            alpha,
            beta,
            gamma: DEFAULT_GAMMA,
            smooth_eps: DEFAULT_SMOOTH,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant == LossKind::Tversky && !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(invalid!(
                "tversky weights must be positive, got alpha={} beta={}",
                self.alpha,
                self.beta
            ));
        }
        if !(self.gamma >= 0.0) {
            return Err(invalid!("focal gamma must be >= 0, got {}", self.gamma));
        }
        if !(self.smooth_eps > 0.0) {
            return Err(invalid!("smooth_eps must be > 0, got {}", self.smooth_eps));
        }
        Ok(())
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.variant {
            LossKind::Ce => f.write_str("CE"),
            LossKind::Dice => f.write_str("Dice"),
            LossKind::Focal => f.write_str("Focal"),
            LossKind::Lovasz => f.write_str("Lovasz"),
            LossKind::Tversky => write!(f, "Tversky ({:.1} / {:.1})", self.alpha, self.beta),
        }
    }
}

/// Probability-weighted confusion counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftConfusion {
    pub tp: f64,
    pub fp: f64,
    pub fn_: f64,
}

impl SoftConfusion {
    /// From foreground probabilities and binary targets.
    pub fn from_probs(p: &[f64], g: &[f64]) -> Self {
        let mut c = Self { tp: 0.0, fp: 0.0, fn_: 0.0 };
        for (&p, &g) in p.iter().zip(g) {
            c.tp += p * g;
            c.fp += p * (1.0 - g);
            c.fn_ += (1.0 - p) * g;
        }
        c
    }

    pub fn tversky_index(&self, alpha: f64, beta: f64, eps: f64) -> f64 {
        (self.tp + eps) / (self.tp + alpha * self.fp + beta * self.fn_ + eps)
    }
}

/// Checks shapes and returns the target as `[N, 1, H, W]`.
fn target_4d<T: Scalar>(g: &Graph<T>, logits: NodeId, target: &Tensor<T>) -> Result<Tensor<T>> {
    let ls = g.shape(logits);
    if ls.len() != 4 || ls[1] != 2 {
        return Err(shape_err!("losses expect 2-class logits [N, 2, H, W], got {ls:?}"));
    }
    let want = [ls[0], 1, ls[2], ls[3]];
    let t = match target.shape() {
        [n, h, w] => target.clone().reshape(&[*n, 1, *h, *w])?,
        _ => target.clone(),
    };
    if t.shape() != want {
        return Err(shape_err!(
            "target {:?} does not match logits {ls:?} (expected [N, H, W] or [N, 1, H, W])",
            target.shape()
        ));
    }
    if t.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(invalid!("target must be binary (0 or 1)"));
    }
    Ok(t)
}

/// Foreground probability `[N, 1, H, W]`.
pub fn foreground_prob<T: Scalar>(g: &mut Graph<T>, logits: NodeId) -> Result<NodeId> {
    let p = g.softmax(logits, 1)?;
    g.slice(p, 1, 1, 1)
}

/// Batch-pooled soft (tp, fp, fn) nodes.
fn soft_counts<T: Scalar>(g: &mut Graph<T>, p: NodeId, target: &Tensor<T>) -> Result<(NodeId, NodeId, NodeId)> {
    let total_g: f64 = target.data().iter().map(|v| v.as_f64()).sum();
    let gt = g.constant(target.clone());
    let pg = g.mul(p, gt)?;
    let tp = g.sum(pg);
    let sp = g.sum(p);
    let fp = g.sub(sp, tp)?;
    let neg = g.mul_scalar(tp, -1.0);
    let fn_ = g.add_scalar(neg, total_g);
    Ok((tp, fp, fn_))
}

fn one_minus<T: Scalar>(g: &mut Graph<T>, x: NodeId) -> NodeId {
    let n = g.mul_scalar(x, -1.0);
    g.add_scalar(n, 1.0)
}

/// `1 − (tp + ε) / (tp + α·fp + β·fn + ε)`.
pub fn tversky_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    target: &Tensor<T>,
    alpha: f64,
    beta: f64,
    smooth_eps: f64,
) -> Result<NodeId> {
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(invalid!("tversky weights must be positive, got alpha={alpha} beta={beta}"));
    }
    let t = target_4d(g, logits, target)?;
    let p = foreground_prob(g, logits)?;
    let (tp, fp, fn_) = soft_counts(g, p, &t)?;
    let a = g.mul_scalar(fp, alpha);
    let b = g.mul_scalar(fn_, beta);
    let d = g.add(tp, a)?;
    let d = g.add(d, b)?;
    let d = g.add_scalar(d, smooth_eps);
    let num = g.add_scalar(tp, smooth_eps);
    let r = g.div(num, d)?;
    Ok(one_minus(g, r))
}

/// `1 − (2tp + ε) / (2tp + fp + fn + ε)`.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, logits: NodeId, target: &Tensor<T>, smooth_eps: f64) -> Result<NodeId> {
    let t = target_4d(g, logits, target)?;
    let p = foreground_prob(g, logits)?;
    let (tp, fp, fn_) = soft_counts(g, p, &t)?;
    let tp2 = g.mul_scalar(tp, 2.0);
    let d = g.add(tp2, fp)?;
    let d = g.add(d, fn_)?;
    let d = g.add_scalar(d, smooth_eps);
    let num = g.add_scalar(tp2, smooth_eps);
    let r = g.div(num, d)?;
    Ok(one_minus(g, r))
}

/// Per-pixel log-probability of the true class, `[N, 1, H, W]`.
fn true_class_logp<T: Scalar>(g: &mut Graph<T>, logits: NodeId, t: &Tensor<T>) -> Result<NodeId> {
    let lp = g.log_softmax(logits, 1)?;
    let bg = g.slice(lp, 1, 0, 1)?;
    let fg = g.slice(lp, 1, 1, 1)?;
    let gt = g.constant(t.clone());
    let inv = g.constant(t.map(|v| T::one() - v));
    let a = g.mul(fg, gt)?;
    let b = g.mul(bg, inv)?;
    g.add(a, b)
}

/// Mean pixelwise `−log p_true`.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: NodeId, target: &Tensor<T>) -> Result<NodeId> {
    let t = target_4d(g, logits, target)?;
    let z = true_class_logp(g, logits, &t)?;
    let m = g.mean(z);
    Ok(g.mul_scalar(m, -1.0))
}

/// Mean pixelwise `−(1 − p_true)^γ · log p_true`.
pub fn focal_loss<T: Scalar>(g: &mut Graph<T>, logits: NodeId, target: &Tensor<T>, gamma: f64) -> Result<NodeId> {
    if !(gamma >= 0.0) {
        return Err(invalid!("focal gamma must be >= 0, got {gamma}"));
    }
    let t = target_4d(g, logits, target)?;
    let z = true_class_logp(g, logits, &t)?;
    let pt = g.exp(z);
    let q = one_minus(g, pt);
    // rounding can leave 1 − p_t a hair below zero when p_t ≈ 1
    let q = g.relu(q);
    let w = g.pow_scalar(q, gamma)?;
    let wz = g.mul(w, z)?;
    let m = g.mean(wz);
    Ok(g.mul_scalar(m, -1.0))
}

/// Gradient of the Lovász extension of the Jaccard loss for ground truth
/// sorted by decreasing error.
pub fn lovasz_weights(sorted_gt: &[bool]) -> Vec<f64> {
    let gts = sorted_gt.iter().filter(|&&b| b).count() as f64;
    let mut out = Vec::with_capacity(sorted_gt.len());
    let (mut cum_g, mut cum_ng) = (0.0, 0.0);
    let mut prev = 0.0;
    for &b in sorted_gt {
        if b {
            cum_g += 1.0;
        } else {
            cum_ng += 1.0;
        }
        let inter = gts - cum_g;
        let union = gts + cum_ng;
        let jac = 1.0 - inter / union;
        out.push(jac - prev);
        prev = jac;
    }
    out
}

/// Lovász-Softmax on foreground probabilities `p` (any shape matching the
/// target), pooled over all pixels.
pub fn lovasz_from_probs<T: Scalar>(g: &mut Graph<T>, p: NodeId, target: &Tensor<T>) -> Result<NodeId> {
    if g.shape(p) != target.shape() {
        return Err(shape_err!("probabilities {:?} vs target {:?}", g.shape(p), target.shape()));
    }
    let n = target.numel();
    if n == 0 {
        return Err(invalid!("lovasz loss needs at least one pixel"));
    }
    let pv = g.value(p).data();
    let gv = target.data();
    let errs: Vec<f64> = pv
        .iter()
        .zip(gv)
        .map(|(&p, &t)| if t == T::one() { 1.0 - p.as_f64() } else { p.as_f64() })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| errs[b].total_cmp(&errs[a]));
    let sorted_gt: Vec<bool> = order.iter().map(|&i| gv[i] == T::one()).collect();
    let w_sorted = lovasz_weights(&sorted_gt);
    let mut w = vec![T::zero(); n];
    for (&i, &wv) in order.iter().zip(&w_sorted) {
        w[i] = T::of(wv);
    }
    // m = p(1 − 2g) + g reproduces the errors differentiably
    let coef = g.constant(target.map(|v| T::one() - v - v));
    let off = g.constant(target.clone());
    let m = g.mul(p, coef)?;
    let m = g.add(m, off)?;
    let wn = g.constant(Tensor::new(target.shape(), w)?);
    let mw = g.mul(m, wn)?;
    Ok(g.sum(mw))
}

pub fn lovasz_softmax<T: Scalar>(g: &mut Graph<T>, logits: NodeId, target: &Tensor<T>) -> Result<NodeId> {
    let t = target_4d(g, logits, target)?;
    let p = foreground_prob(g, logits)?;
    lovasz_from_probs(g, p, &t)
}

/// Dispatches on the spec's variant.
pub fn loss<T: Scalar>(g: &mut Graph<T>, logits: NodeId, target: &Tensor<T>, spec: &LossSpec) -> Result<NodeId> {
    spec.validate()?;
    match spec.variant {
        LossKind::Ce => cross_entropy(g, logits, target),
        LossKind::Dice => dice_loss(g, logits, target, spec.smooth_eps),
        LossKind::Focal => focal_loss(g, logits, target, spec.gamma),
        LossKind::Lovasz => lovasz_softmax(g, logits, target),
        LossKind::Tversky => tversky_loss(g, logits, target, spec.alpha, spec.beta, spec.smooth_eps),
    }
}
