//! Training and inference loops around the rerank and refine heads.
//!
//! Training picks a reference frame `r = t - n` with `n` drawn from a gap
//! distribution and uses the proposal nearest the ground truth on frame `r`
//! as the reference box. Inference references the previous frame's
//! reranked box.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{build_pyramid, msr_backward, msr_fuse, msr_fuse_cached, FeaturePyramid, RoiEmbedding};
use crate::geometry::{argmin_by, center_error, geo_descriptor, iou, select_reference_box, BBox, SelectionRule};
use crate::heatmap::{render_inference, rescale_box, Heatmap, HeatmapConfig, HeatmapState};
use crate::losses::{loss_ce, loss_geo, loss_rank, loss_refine, loss_total, LossBundle, LossComponents, LossConfig};
use crate::model::{
    refine_backward, refine_forward, refine_forward_cached, rerank_argmax, rerank_backward, rerank_forward,
    rerank_forward_masked, TrackerParams,
};
use crate::synth::SyntheticSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapDistribution {
    pub gaps: Vec<usize>,
    pub probs: Vec<f64>,
}

impl Default for GapDistribution {
    fn default() -> Self {
        Self { gaps: vec![1, 2, 4, 8, 16, 32], probs: vec![0.4, 0.2, 0.1, 0.1, 0.1, 0.1] }
    }
}

impl GapDistribution {
    pub fn validate(&self) -> Result<()> {
        if self.gaps.is_empty() || self.gaps.len() != self.probs.len() {
            return Err(Error::Config("gaps and probs must be non-empty and of equal length".into()));
        }
        if self.gaps.iter().any(|&g| g == 0) {
            return Err(Error::Config("gaps must be positive".into()));
        }
        if self.probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Config("gap probabilities must be non-negative".into()));
        }
        if (self.probs.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Config("gap probabilities must sum to 1".into()));
        }
        Ok(())
    }
}

/// Categorical draw of a gap.
pub fn sample_gap(dist: &GapDistribution, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (&g, &p) in dist.gaps.iter().zip(&dist.probs) {
        acc += p;
        if u < acc {
            return g;
        }
    }
    // rounding left a sliver above the last cumulative bound
    *dist.gaps.iter().zip(&dist.probs).rev().find(|(_, &p)| p > 0.0).map(|(g, _)| g).unwrap_or(&dist.gaps[0])
}

/// Reference frame for target `t` and gap `n`, clipped to the first frame.
pub fn reference_frame(t: usize, n: usize) -> usize {
    t.saturating_sub(n)
}

/// A sequence with its feature pyramids computed once.
#[derive(Debug, Clone)]
pub struct PreparedSequence {
    pub seq: SyntheticSequence,
    pub pyramids: Vec<FeaturePyramid>,
}

impl PreparedSequence {
    pub fn new(seq: SyntheticSequence) -> Self {
        let pyramids = seq.frames.par_iter().map(build_pyramid).collect();
        Self { seq, pyramids }
    }
}

/// Result of one training sample.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub bundle: LossBundle,
    pub grads: TrackerParams,
    /// No proposal at `t` overlaps the ground truth; loss and gradients are zero.
    pub skipped: bool,
}

/// Reference box used during training: the proposal on frame `r` nearest
/// the ground truth, or the ground truth itself when `r` has no proposals.
pub fn training_reference(seq: &SyntheticSequence, r: usize) -> BBox {
    match select_reference_box(&seq.proposals[r], &seq.gt_boxes[r], SelectionRule::MinErr) {
        Ok((_, b)) => b,
        Err(_) => seq.gt_boxes[r],
    }
}

/// Loss and parameter gradients for target frame `t` with reference `r`.
pub fn train_step(
    data: &PreparedSequence,
    t: usize,
    r: usize,
    params: &TrackerParams,
    cfg: &LossConfig,
) -> Result<StepOutput> {
    let seq = &data.seq;
    if !seq.has_labels() {
        return Err(Error::InvalidArgument("training needs ground-truth boxes".into()));
    }
    let gt = seq.gt_boxes[t];
    let set = &seq.proposals[t];
    let mask: Vec<bool> = set.entries.iter().map(|p| iou(&p.bbox, &gt) > 0.0).collect();
    let mut grads = params.zeros_like();
    if !mask.iter().any(|&m| m) {
        return Ok(StepOutput { bundle: LossBundle::default(), grads, skipped: true });
    }

    let ref_box = training_reference(seq, r);
    let (f_r, ref_cache) = msr_fuse_cached(&data.pyramids[r], &ref_box, &params.proj);
    let mut cands = Vec::with_capacity(set.len());
    let mut caches = Vec::with_capacity(set.len());
    for (p, &m) in set.entries.iter().zip(&mask) {
        if m {
            let (e, c) = msr_fuse_cached(&data.pyramids[t], &p.bbox, &params.proj);
            cands.push(e);
            caches.push(Some(c));
        } else {
            cands.push(RoiEmbedding(vec![0.0; params.config.d_emb]));
            caches.push(None);
        }
    }

    let (logits, rcache) = rerank_forward_masked(&f_r, &cands, &mask, &params.rerank)?;
    let k_hat = rerank_argmax(&logits).ok_or(Error::NoProposals)?;
    let k_star = argmin_by(set.entries.iter().zip(&mask), |(p, &m)| {
        if m {
            center_error(&p.bbox, &gt)
        } else {
            f64::INFINITY
        }
    })
    .ok_or(Error::NoProposals)?;

    let base = set.entries[k_hat].bbox;
    let geo = geo_descriptor(&base, &ref_box, seq.dims);
    let (_, refined, fcache) = refine_forward_cached(&cands[k_hat], &geo, &base, &params.refine, seq.dims);

    let refine = loss_refine(&refined, &gt, seq.dims, cfg);
    let comps = LossComponents {
        ce: loss_ce(&logits, k_star)?,
        geo: loss_geo(&logits, set, &gt, seq.dims, cfg)?,
        rank: loss_rank(&logits, set, &gt, cfg)?,
        dist: refine.dist,
        scale: refine.scale,
    };
    let bundle = loss_total(&comps, cfg);
    if !bundle.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss at frame {t}")));
    }

    let rg = rerank_backward(&rcache, &params.rerank, &f_r, &cands, &bundle.d_logits);
    let fg = refine_backward(&fcache, &params.refine, bundle.d_box);
    grads.rerank = rg.params;
    grads.refine = fg.params;
    msr_backward(&ref_cache, &rg.d_ref, &mut grads.proj);
    for (k, cache) in caches.iter().enumerate() {
        if let Some(c) = cache {
            let mut d = rg.d_candidates[k].clone();
            if k == k_hat {
                for (a, b) in d.iter_mut().zip(&fg.d_embedding) {
                    *a += b;
                }
            }
            msr_backward(c, &d, &mut grads.proj);
        }
    }
    Ok(StepOutput { bundle, grads, skipped: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Gradient descent with heavy-ball momentum.
    Sgd,
    /// Adam with decoupled weight decay.
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Global gradient-norm cap; zero disables clipping.
    pub grad_clip: f64,
    /// Learning-rate multiplier for the embedding projections.
    pub proj_lr_scale: f64,
    /// Filled from the run's master seed; not part of the config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-4,
            optimizer: Optimizer::Sgd,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            batch_size: 16,
            grad_clip: 0.0,
            proj_lr_scale: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train: lr must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train: batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::Config("train: momentum and betas must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) || !(self.proj_lr_scale >= 0.0) {
            return Err(Error::Config(
                "train: weight_decay, grad_clip and proj_lr_scale must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean: LossBundle,
    pub samples: usize,
    pub skipped: usize,
}

struct OptimizerState {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    /// Per-parameter learning rate.
    lr: Vec<f64>,
}

impl OptimizerState {
    fn new(params: &TrackerParams, cfg: &TrainConfig) -> Self {
        let n = params.n_trainable();
        let n_proj: usize = params.proj.levels.iter().map(|m| m.data.len()).sum();
        let lr = (0..n).map(|i| if i < n_proj { cfg.lr * cfg.proj_lr_scale } else { cfg.lr }).collect();
        Self { step: 0, m: vec![0.0; n], v: vec![0.0; n], lr }
    }

    fn apply(&mut self, cfg: &TrainConfig, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (((p, m), g), lr) in params.iter_mut().zip(&mut self.m).zip(grad).zip(&self.lr) {
                    *m = cfg.momentum * *m + g;
                    *p -= lr * *m;
                }
            }
            Optimizer::AdamW => {
                let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
                let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
                let state = self.m.iter_mut().zip(&mut self.v).zip(&self.lr);
                for ((p, g), ((m, v), lr)) in params.iter_mut().zip(grad).zip(state) {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + 1e-8);
                    *p -= lr * (update + cfg.weight_decay * *p);
                }
            }
        }
    }
}

/// Trains `params` in place and returns one [`EpochStats`] per epoch.
///
/// Gap draws and sample order come from a generator seeded with
/// `cfg.seed`; per-batch gradients are summed in sample order, so results do
/// not depend on the thread count.
pub fn train(
    data: &[PreparedSequence],
    params: &mut TrackerParams,
    gaps: &GapDistribution,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    gaps.validate()?;
    loss_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(params, cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    let samples: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(s, d)| (1..d.seq.len()).map(move |t| (s, t)))
        .collect();

    for epoch in 0..cfg.epochs {
        let mut order = samples.clone();
        order.shuffle(&mut rng);
        let jobs: Vec<(usize, usize, usize)> = order
            .into_iter()
            .map(|(s, t)| (s, t, reference_frame(t, sample_gap(gaps, &mut rng))))
            .collect();

        let mut bundles = Vec::with_capacity(jobs.len());
        let mut skipped = 0;
        for batch in jobs.chunks(cfg.batch_size) {
            let outputs: Vec<Result<StepOutput>> = batch
                .par_iter()
                .map(|&(s, t, r)| train_step(&data[s], t, r, params, loss_cfg))
                .collect();
            let mut acc = params.zeros_like();
            let mut used = 0usize;
            for out in outputs {
                let out = out?;
                if out.skipped {
                    skipped += 1;
                    continue;
                }
                acc.add_scaled(1.0, &out.grads);
                bundles.push(out.bundle);
                used += 1;
            }
            if used == 0 {
                continue;
            }
            let mut grad = acc.flat();
            let inv = 1.0 / used as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            if cfg.grad_clip > 0.0 {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > cfg.grad_clip {
                    let s = cfg.grad_clip / norm;
                    grad.iter_mut().for_each(|g| *g *= s);
                }
            }
            let mut flat = params.flat();
            opt.apply(cfg, &mut flat, &grad);
            params.set_flat(&flat);
            if !params.is_finite() {
                return Err(Error::Numerical(format!("parameters became non-finite in epoch {epoch}")));
            }
        }
        history.push(EpochStats { epoch, mean: LossBundle::mean(&bundles), samples: bundles.len(), skipped });
    }
    Ok(history)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Highest-confidence proposal on the first frame.
    Conf,
    /// Ground-truth box on the first frame.
    Gt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackConfig {
    pub init: InitMode,
    /// Apply the refinement head; false gives the rerank-only variant.
    pub refine: bool,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self { init: InitMode::Conf, refine: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackFrame {
    pub t: usize,
    /// Reranked proposal (the reference for the next frame).
    pub reranked: BBox,
    /// Output box after refinement.
    pub refined: BBox,
    pub selected_k: Option<usize>,
    pub logit: Option<f64>,
    /// The proposal set was empty and the previous boxes were kept.
    pub held: bool,
    /// Proposal indices by descending logit (confidence order on frame 0).
    pub ranking: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    pub frames: Vec<TrackFrame>,
    pub heatmaps: Vec<Heatmap>,
}

impl TrackResult {
    pub fn refined_boxes(&self) -> Vec<BBox> {
        self.frames.iter().map(|f| f.refined).collect()
    }

    pub fn reranked_boxes(&self) -> Vec<BBox> {
        self.frames.iter().map(|f| f.reranked).collect()
    }

    pub fn rankings(&self) -> Vec<Vec<usize>> {
        self.frames.iter().map(|f| f.ranking.clone()).collect()
    }

    pub const CSV_HEADER: &'static str = "t,cx,cy,w,h,selected_k,logit";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for f in &self.frames {
            let b = f.refined;
            let k = f.selected_k.map(|k| k.to_string()).unwrap_or_default();
            let l = f.logit.map(|l| format!("{l:.6}")).unwrap_or_default();
            s.push_str(&format!("{},{:.4},{:.4},{:.4},{:.4},{},{}\n", f.t, b.cx, b.cy, b.w, b.h, k, l));
        }
        s
    }
}

/// Runs inference over a whole sequence. With `heat` set, heatmaps are
/// rendered at its resolution, with boxes rescaled from frame pixels.
pub fn track(
    data: &PreparedSequence,
    params: &TrackerParams,
    heat: Option<&HeatmapConfig>,
    cfg: &TrackConfig,
) -> Result<TrackResult> {
    if let Some(h) = heat {
        h.validate()?;
    }
    let seq = &data.seq;
    let mut out = TrackResult { frames: Vec::with_capacity(seq.len()), heatmaps: Vec::with_capacity(seq.len()) };
    if seq.is_empty() {
        return Ok(out);
    }
    let mut state = heat.map(|h| HeatmapState::new(h.dims()));
    let mut render = |b: &BBox, out: &mut TrackResult| {
        if let (Some(h), Some(st)) = (heat, state.as_mut()) {
            let (map, next) = render_inference(&rescale_box(b, seq.dims, h.dims()), st, h);
            *st = next;
            out.heatmaps.push(map);
        }
    };
    let first = match cfg.init {
        InitMode::Conf => {
            let p = seq.proposals[0].entries.first().ok_or(Error::NoProposals)?;
            TrackFrame {
                t: 0,
                reranked: p.bbox,
                refined: p.bbox,
                selected_k: Some(0),
                logit: None,
                held: false,
                ranking: (0..seq.proposals[0].len()).collect(),
            }
        }
        InitMode::Gt => {
            let gt = *seq
                .gt_boxes
                .first()
                .ok_or_else(|| Error::InvalidArgument("ground-truth initialisation needs labels".into()))?;
            TrackFrame {
                t: 0,
                reranked: gt,
                refined: gt,
                selected_k: None,
                logit: None,
                held: false,
                ranking: (0..seq.proposals[0].len()).collect(),
            }
        }
    };
    render(&first.refined, &mut out);
    out.frames.push(first);

    for t in 1..seq.len() {
        let prev = out.frames[t - 1].clone();
        let set = &seq.proposals[t];
        let frame = if set.is_empty() {
            TrackFrame { t, held: true, selected_k: None, logit: None, ranking: Vec::new(), ..prev }
        } else {
            let f_r = msr_fuse(&data.pyramids[t - 1], &prev.reranked, &params.proj);
            let cands: Vec<RoiEmbedding> =
                set.entries.iter().map(|p| msr_fuse(&data.pyramids[t], &p.bbox, &params.proj)).collect();
            let logits = rerank_forward(&f_r, &cands, &params.rerank)?;
            if logits.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite logit at frame {t}")));
            }
            let k = rerank_argmax(&logits).ok_or(Error::NoProposals)?;
            let base = set.entries[k].bbox;
            let refined = if cfg.refine {
                let geo = geo_descriptor(&base, &prev.reranked, seq.dims);
                refine_forward(&cands[k], &geo, &base, &params.refine, seq.dims).1
            } else {
                base
            };
            if !refined.is_valid() {
                return Err(Error::Numerical(format!("invalid refined box at frame {t}")));
            }
            TrackFrame {
                t,
                reranked: base,
                refined,
                selected_k: Some(k),
                logit: Some(logits.values[k]),
                held: false,
                ranking: logits.ranking(),
            }
        };
        render(&frame.refined, &mut out);
        out.frames.push(frame);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_gap_always_returned() {
        let d = GapDistribution { gaps: vec![1], probs: vec![1.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| sample_gap(&d, &mut rng) == 1));
    }

    #[test]
    fn reference_clips_to_first_frame() {
        assert_eq!(reference_frame(2, 8), 0);
        assert_eq!(reference_frame(40, 8), 32);
        let d = GapDistribution::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in 1..64 {
            let r = reference_frame(t, sample_gap(&d, &mut rng));
            assert!(r < t);
        }
    }

    #[test]
    fn gap_validation() {
        assert!(GapDistribution::default().validate().is_ok());
        assert!(GapDistribution { gaps: vec![1, 2], probs: vec![0.5, 0.6] }.validate().is_err());
        assert!(GapDistribution { gaps: vec![1], probs: vec![1.0, 0.0] }.validate().is_err());
    }
}
