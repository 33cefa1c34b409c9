//! Training objective for the two heads plus a finite-difference checker.
//!
//! Reranking terms (`ce`, `geo`, `rank`) produce gradients with respect to
//! the logits. Refinement terms (`dist`, `scale`) produce gradients with
//! respect to the refined box `(cx, cy, w, h)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{center_error, BBox, FrameDims};
use crate::linalg::masked_softmax;
use crate::model::RerankLogits;
use crate::synth::ProposalSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub sigma_rank: f64,
    pub top_m: usize,
    pub lambda_geo: f64,
    pub lambda_rank: f64,
    pub lambda_dist: f64,
    pub huber_delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.15,
            sigma_rank: 15.0,
            top_m: 5,
            lambda_geo: 0.1,
            lambda_rank: 0.5,
            lambda_dist: 0.1,
            huber_delta: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("loss: {m}")));
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(self.sigma_rank > 0.0) {
            return bad("sigma_rank must be positive");
        }
        if self.top_m == 0 {
            return bad("top_m must be at least 1");
        }
        if !(self.huber_delta > 0.0) {
            return bad("huber_delta must be positive");
        }
        for (name, v) in [
            ("lambda_geo", self.lambda_geo),
            ("lambda_rank", self.lambda_rank),
            ("lambda_dist", self.lambda_dist),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(&format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

pub fn huber(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        0.5 * x * x
    } else {
        delta * (a - 0.5 * delta)
    }
}

pub fn huber_grad(x: f64, delta: f64) -> f64 {
    x.clamp(-delta, delta)
}

/// A reranking term: value and gradient over the logits.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LogitTerm {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// A refinement term: value and gradient over `(cx, cy, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxTerm {
    pub value: f64,
    pub grad: [f64; 4],
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Cross-entropy of the valid-entry softmax against index `k_star`.
pub fn loss_ce(logits: &RerankLogits, k_star: usize) -> Result<LogitTerm> {
    if k_star >= logits.len() || !logits.mask[k_star] {
        return Err(Error::InvalidArgument(format!("target index {k_star} is not a valid proposal")));
    }
    let valid = logits.values.iter().zip(&logits.mask).filter(|(_, &m)| m).map(|(v, _)| *v);
    let lse = log_sum_exp(valid);
    let value = lse - logits.values[k_star];
    let mut grad = masked_softmax(&logits.values, &logits.mask, 1.0);
    grad[k_star] -= 1.0;
    Ok(LogitTerm { value, grad })
}

/// Huber penalty on the diagonal-normalised distance between the
/// temperature-softmax-weighted proposal center and the target center.
pub fn loss_geo(
    logits: &RerankLogits,
    proposals: &ProposalSet,
    gt: &BBox,
    dims: FrameDims,
    cfg: &LossConfig,
) -> Result<LogitTerm> {
    check_shapes(logits, proposals)?;
    let pi = masked_softmax(&logits.values, &logits.mask, cfg.tau);
    let agg = soft_aggregate(proposals, &pi);
    let (dx, dy) = (agg.cx - gt.cx, agg.cy - gt.cy);
    let dist = dx.hypot(dy);
    let diag = dims.diagonal();
    let e = dist / diag;
    let value = huber(e, cfg.huber_delta);

    let mut grad = vec![0.0; pi.len()];
    if dist > 0.0 {
        let scale = huber_grad(e, cfg.huber_delta) / (dist * diag);
        let (gx, gy) = (scale * dx, scale * dy);
        let d_pi: Vec<f64> = proposals.entries.iter().map(|p| gx * p.bbox.cx + gy * p.bbox.cy).collect();
        let inner: f64 = pi.iter().zip(&d_pi).map(|(p, d)| p * d).sum();
        for k in 0..pi.len() {
            if logits.mask[k] {
                grad[k] = pi[k] * (d_pi[k] - inner) / cfg.tau;
            }
        }
    }
    Ok(LogitTerm { value, grad })
}

/// Probability-weighted average of all four box fields.
pub fn soft_aggregate(proposals: &ProposalSet, weights: &[f64]) -> BBox {
    let mut acc = [0.0; 4];
    for (p, w) in proposals.entries.iter().zip(weights) {
        for (a, v) in acc.iter_mut().zip(p.bbox.to_array()) {
            *a += w * v;
        }
    }
    BBox::from_array(acc)
}

/// Indices of the `min(M, valid)` valid proposals nearest the target center,
/// nearest first, lowest index on ties.
pub fn rank_pool(logits: &RerankLogits, proposals: &ProposalSet, gt: &BBox, top_m: usize) -> Vec<usize> {
    let mut idx: Vec<(f64, usize)> = proposals
        .entries
        .iter()
        .enumerate()
        .filter(|(k, _)| logits.mask[*k])
        .map(|(k, p)| (center_error(&p.bbox, gt), k))
        .collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    idx.truncate(top_m);
    idx.into_iter().map(|(_, k)| k).collect()
}

/// Geometric teacher over the pool: `q_k ∝ exp(-err_k / sigma)`.
pub fn teacher_distribution(errors: &[f64], sigma: f64) -> Vec<f64> {
    let min = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = errors.iter().map(|e| (-(e - min) / sigma).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Listwise cross-entropy between the pool-renormalised logit softmax and
/// the geometric teacher.
pub fn loss_rank(
    logits: &RerankLogits,
    proposals: &ProposalSet,
    gt: &BBox,
    cfg: &LossConfig,
) -> Result<LogitTerm> {
    check_shapes(logits, proposals)?;
    let pool = rank_pool(logits, proposals, gt, cfg.top_m);
    if pool.is_empty() {
        return Err(Error::NoProposals);
    }
    let errors: Vec<f64> = pool.iter().map(|&k| center_error(&proposals.entries[k].bbox, gt)).collect();
    let q = teacher_distribution(&errors, cfg.sigma_rank);
    let pooled: Vec<f64> = pool.iter().map(|&k| logits.values[k]).collect();
    let lse = log_sum_exp(pooled.iter().copied());
    let mut value = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (j, &k) in pool.iter().enumerate() {
        let log_p = pooled[j] - lse;
        value -= q[j] * log_p;
        grad[k] = log_p.exp() - q[j];
    }
    Ok(LogitTerm { value, grad })
}

fn check_shapes(logits: &RerankLogits, proposals: &ProposalSet) -> Result<()> {
    if logits.len() != proposals.entries.len() {
        return Err(Error::InvalidArgument(format!(
            "{} logits for {} proposals",
            logits.len(),
            proposals.entries.len()
        )));
    }
    if logits.n_valid() == 0 {
        return Err(Error::NoProposals);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineLoss {
    pub dist: BoxTerm,
    pub scale: BoxTerm,
    /// `lambda_dist * dist + scale`, with its gradient.
    pub weighted: BoxTerm,
}

pub fn loss_refine(refined: &BBox, gt: &BBox, dims: FrameDims, cfg: &LossConfig) -> RefineLoss {
    let delta = cfg.huber_delta;
    let diag = dims.diagonal();
    let (dx, dy) = (refined.cx - gt.cx, refined.cy - gt.cy);
    let dist_px = dx.hypot(dy);
    let e = dist_px / diag;
    let mut dist = BoxTerm { value: huber(e, delta), grad: [0.0; 4] };
    if dist_px > 0.0 {
        let s = huber_grad(e, delta) / (dist_px * diag);
        dist.grad[0] = s * dx;
        dist.grad[1] = s * dy;
    }

    let lw = refined.w.ln() - gt.w.ln();
    let lh = refined.h.ln() - gt.h.ln();
    let scale = BoxTerm {
        value: huber(lw, delta) + huber(lh, delta),
        grad: [0.0, 0.0, huber_grad(lw, delta) / refined.w, huber_grad(lh, delta) / refined.h],
    };

    let mut weighted = BoxTerm { value: cfg.lambda_dist * dist.value + scale.value, grad: [0.0; 4] };
    for i in 0..4 {
        weighted.grad[i] = cfg.lambda_dist * dist.grad[i] + scale.grad[i];
    }
    RefineLoss { dist, scale, weighted }
}

/// Unweighted loss components for one training frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossComponents {
    pub ce: LogitTerm,
    pub geo: LogitTerm,
    pub rank: LogitTerm,
    pub dist: BoxTerm,
    pub scale: BoxTerm,
}

impl LossComponents {
    /// Components with values only and empty gradients.
    pub fn from_values(ce: f64, geo: f64, rank: f64, dist: f64, scale: f64) -> Self {
        let lt = |value| LogitTerm { value, grad: Vec::new() };
        let bt = |value| BoxTerm { value, grad: [0.0; 4] };
        Self { ce: lt(ce), geo: lt(geo), rank: lt(rank), dist: bt(dist), scale: bt(scale) }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBundle {
    pub ce: f64,
    pub geo: f64,
    pub rank: f64,
    pub dist: f64,
    pub scale: f64,
    pub rerank_total: f64,
    pub refine_total: f64,
    pub total: f64,
    /// Gradient of `total` with respect to the logits.
    pub d_logits: Vec<f64>,
    /// Gradient of `total` with respect to the refined box.
    pub d_box: [f64; 4],
}

impl LossBundle {
    pub fn values(&self) -> [f64; 8] {
        [self.ce, self.geo, self.rank, self.dist, self.scale, self.rerank_total, self.refine_total, self.total]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().chain(&self.d_logits).chain(&self.d_box).all(|v| v.is_finite())
    }

    /// Element-wise mean of the scalar fields; gradients are dropped.
    pub fn mean(bundles: &[LossBundle]) -> LossBundle {
        let mut out = LossBundle::default();
        if bundles.is_empty() {
            return out;
        }
        let n = bundles.len() as f64;
        for b in bundles {
            out.ce += b.ce / n;
            out.geo += b.geo / n;
            out.rank += b.rank / n;
            out.dist += b.dist / n;
            out.scale += b.scale / n;
            out.rerank_total += b.rerank_total / n;
            out.refine_total += b.refine_total / n;
            out.total += b.total / n;
        }
        out
    }
}

pub fn loss_total(c: &LossComponents, cfg: &LossConfig) -> LossBundle {
    let rerank_total = c.ce.value + cfg.lambda_geo * c.geo.value + cfg.lambda_rank * c.rank.value;
    let refine_total = cfg.lambda_dist * c.dist.value + c.scale.value;
    let n = c.ce.grad.len().max(c.geo.grad.len()).max(c.rank.grad.len());
    let mut d_logits = vec![0.0; n];
    for (term, w) in [(&c.ce, 1.0), (&c.geo, cfg.lambda_geo), (&c.rank, cfg.lambda_rank)] {
        for (d, g) in d_logits.iter_mut().zip(&term.grad) {
            *d += w * g;
        }
    }
    let mut d_box = [0.0; 4];
    for i in 0..4 {
        d_box[i] = cfg.lambda_dist * c.dist.grad[i] + c.scale.grad[i];
    }
    LossBundle {
        ce: c.ce.value,
        geo: c.geo.value,
        rank: c.rank.value,
        dist: c.dist.value,
        scale: c.scale.value,
        rerank_total,
        refine_total,
        total: rerank_total + refine_total,
        d_logits,
        d_box,
    }
}

/// Magnitudes below this are compared absolutely in [`grad_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel: f64,
    pub max_abs: f64,
}

/// Compares `analytic` with central differences of `f` at `x`.
pub fn grad_check_report(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], step: f64) -> GradCheckReport {
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    let mut report = GradCheckReport { max_rel: 0.0, max_abs: 0.0 };
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * step);
        let abs = (numeric - analytic[i]).abs();
        let rel = abs / numeric.abs().max(analytic[i].abs()).max(GRAD_CHECK_FLOOR);
        report.max_abs = report.max_abs.max(abs);
        report.max_rel = report.max_rel.max(rel);
    }
    report
}

/// Worst-case relative error between `analytic` and central differences.
pub fn grad_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], step: f64) -> f64 {
    grad_check_report(f, x, analytic, step).max_rel
}
