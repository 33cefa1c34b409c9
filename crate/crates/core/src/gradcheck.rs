//! Finite-difference audit of the hand-written backward passes. Each check
//! draws seeded random instances and compares the analytic gradient with
//! central differences of the scalar it differentiates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::features::{Frame, RoiEmbedding};
use crate::geometry::{BBox, FrameDims, GeoDescriptor};
use crate::linalg::{dot, Matrix};
use crate::losses::{
    grad_check_report, loss_ce, loss_geo, loss_rank, loss_refine, loss_total, GradCheckReport, LogitTerm, LossComponents,
    LossConfig,
};
use crate::model::{
    refine_backward, refine_forward_cached, rerank_backward, rerank_forward_masked, ModelConfig, RefineParams,
    RerankLogits, RerankParams, TrackerParams,
};
use crate::synth::{Proposal, ProposalSet, SyntheticSequence};
use crate::tracker::{train_step, PreparedSequence};

/// Acceptance bound on the worst relative error.
pub const TOLERANCE: f64 = 1e-4;

const STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_rel: f64,
    pub max_abs: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel < TOLERANCE
    }
}

fn merge(name: &str, reports: &[GradCheckReport]) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        instances: reports.len(),
        max_rel: reports.iter().map(|r| r.max_rel).fold(0.0, f64::max),
        max_abs: reports.iter().map(|r| r.max_abs).fold(0.0, f64::max),
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

const FRAME: FrameDims = FrameDims { width: 200, height: 150 };

fn random_box(rng: &mut ChaCha8Rng, dims: FrameDims) -> BBox {
    let w = rng.random_range(8.0..60.0);
    let h = rng.random_range(8.0..60.0);
    BBox::new(
        rng.random_range(w / 2.0..dims.width as f64 - w / 2.0),
        rng.random_range(h / 2.0..dims.height as f64 - h / 2.0),
        w,
        h,
    )
}

/// Logits, proposals, mask and target for the loss checks.
struct LossInstance {
    logits: RerankLogits,
    set: ProposalSet,
    gt: BBox,
    k_star: usize,
}

fn loss_instance(rng: &mut ChaCha8Rng) -> LossInstance {
    let k = rng.random_range(2..=8);
    let entries = (0..k).map(|_| Proposal { bbox: random_box(rng, FRAME), confidence: 0.5 }).collect();
    let set = ProposalSet { frame: 0, capacity: k, entries };
    let mut mask: Vec<bool> = (0..k).map(|_| rng.random_bool(0.8)).collect();
    let k_star = rng.random_range(0..k);
    mask[k_star] = true;
    let values = (0..k).map(|_| 2.0 * normal(rng)).collect();
    LossInstance { logits: RerankLogits { values, mask }, set, gt: random_box(rng, FRAME), k_star }
}

fn with_values(logits: &RerankLogits, values: &[f64]) -> RerankLogits {
    RerankLogits { values: values.to_vec(), mask: logits.mask.clone() }
}

fn check_logit_loss(
    name: &str,
    seed: u64,
    n: usize,
    term: impl Fn(&LossInstance, &RerankLogits) -> Result<LogitTerm>,
) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(n);
    for _ in 0..n {
        let inst = loss_instance(&mut rng);
        let analytic = term(&inst, &inst.logits)?.grad;
        let f = |x: &[f64]| term(&inst, &with_values(&inst.logits, x)).map(|t| t.value).unwrap_or(f64::NAN);
        reports.push(grad_check_report(f, &inst.logits.values, &analytic, STEP));
    }
    Ok(merge(name, &reports))
}

fn check_box_loss(name: &str, seed: u64, n: usize, cfg: &LossConfig, pick_scale: bool) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(n);
    for _ in 0..n {
        let refined = random_box(&mut rng, FRAME);
        let gt = random_box(&mut rng, FRAME);
        let term = |b: &BBox| {
            let l = loss_refine(b, &gt, FRAME, cfg);
            if pick_scale {
                l.scale
            } else {
                l.dist
            }
        };
        let analytic = term(&refined).grad;
        let f = |x: &[f64]| term(&BBox::new(x[0], x[1], x[2], x[3])).value;
        reports.push(grad_check_report(f, &refined.to_array(), &analytic, STEP));
    }
    merge(name, &reports)
}

fn total_value(inst: &LossInstance, values: &[f64], refined: &BBox, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    let logits = with_values(&inst.logits, values);
    let r = loss_refine(refined, &inst.gt, FRAME, cfg);
    let comps = LossComponents {
        ce: loss_ce(&logits, inst.k_star)?,
        geo: loss_geo(&logits, &inst.set, &inst.gt, FRAME, cfg)?,
        rank: loss_rank(&logits, &inst.set, &inst.gt, cfg)?,
        dist: r.dist,
        scale: r.scale,
    };
    let b = loss_total(&comps, cfg);
    let mut grad = b.d_logits.clone();
    grad.extend_from_slice(&b.d_box);
    Ok((b.total, grad))
}

fn check_total(seed: u64, n: usize, cfg: &LossConfig) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(n);
    for _ in 0..n {
        let inst = loss_instance(&mut rng);
        let refined = random_box(&mut rng, FRAME);
        let k = inst.logits.len();
        let mut x = inst.logits.values.clone();
        x.extend_from_slice(&refined.to_array());
        let (_, analytic) = total_value(&inst, &inst.logits.values, &refined, cfg)?;
        let f = |x: &[f64]| {
            let b = BBox::new(x[k], x[k + 1], x[k + 2], x[k + 3]);
            total_value(&inst, &x[..k], &b, cfg).map(|v| v.0).unwrap_or(f64::NAN)
        };
        reports.push(grad_check_report(f, &x, &analytic, STEP));
    }
    Ok(merge("total", &reports))
}

fn small_model() -> ModelConfig {
    ModelConfig { d_emb: 6, n_heads: 2, d_k: 3, hidden: 8, pool: 2, refine_step_bias: 0.0 }
}

fn rerank_flat(p: &RerankParams) -> Vec<f64> {
    let mut v = Vec::new();
    for m in p.wq.iter().chain(&p.wk).chain(&p.wv) {
        v.extend_from_slice(&m.data);
    }
    v.extend_from_slice(&p.wo.data);
    v.extend_from_slice(&p.ws);
    v.extend_from_slice(&p.bias);
    v
}

fn rerank_unflat(template: &RerankParams, x: &[f64]) -> RerankParams {
    let mut out = template.clone();
    let mut it = x.iter().copied();
    for m in out.wq.iter_mut().chain(out.wk.iter_mut()).chain(out.wv.iter_mut()) {
        m.data.iter_mut().for_each(|v| *v = it.next().unwrap());
    }
    out.wo.data.iter_mut().for_each(|v| *v = it.next().unwrap());
    out.ws.iter_mut().for_each(|v| *v = it.next().unwrap());
    out.bias[0] = it.next().unwrap();
    out
}

fn random_embedding(rng: &mut ChaCha8Rng, d: usize) -> RoiEmbedding {
    RoiEmbedding((0..d).map(|_| normal(rng)).collect())
}

/// Checks the reranker backward pass on `L = c . logits` with the
/// coefficients of masked candidates set to zero.
fn check_rerank(seed: u64, n: usize) -> Result<CheckResult> {
    let cfg = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(n);
    for _ in 0..n {
        let params = RerankParams::init(&cfg, &mut rng);
        let k = rng.random_range(2..=6);
        let f_r = random_embedding(&mut rng, cfg.d_emb);
        let cands: Vec<RoiEmbedding> = (0..k).map(|_| random_embedding(&mut rng, cfg.d_emb)).collect();
        let mut mask: Vec<bool> = (0..k).map(|_| rng.random_bool(0.8)).collect();
        mask[0] = true;
        let c: Vec<f64> = mask.iter().map(|&m| if m { normal(&mut rng) } else { 0.0 }).collect();

        let (_, cache) = rerank_forward_masked(&f_r, &cands, &mask, &params)?;
        let g = rerank_backward(&cache, &params, &f_r, &cands, &c);
        let n_p = rerank_flat(&params).len();
        let d = cfg.d_emb;
        let mut x = rerank_flat(&params);
        x.extend_from_slice(&f_r.0);
        let mut analytic = rerank_flat(&g.params);
        analytic.extend_from_slice(&g.d_ref);
        for (e, dc) in cands.iter().zip(&g.d_candidates) {
            x.extend_from_slice(&e.0);
            analytic.extend_from_slice(dc);
        }
        let f = |x: &[f64]| {
            let p = rerank_unflat(&params, &x[..n_p]);
            let fr = RoiEmbedding(x[n_p..n_p + d].to_vec());
            let cs: Vec<RoiEmbedding> =
                (0..k).map(|j| RoiEmbedding(x[n_p + d * (j + 1)..n_p + d * (j + 2)].to_vec())).collect();
            let (l, _) = rerank_forward_masked(&fr, &cs, &mask, &p).expect("mask has a valid entry");
            dot(&c, &l.values)
        };
        reports.push(grad_check_report(f, &x, &analytic, STEP));
    }
    Ok(merge("rerank_backward", &reports))
}

fn refine_flat(p: &RefineParams) -> Vec<f64> {
    [&p.w1.data[..], &p.b1, &p.w2.data, &p.b2].concat()
}

fn refine_unflat(template: &RefineParams, x: &[f64]) -> RefineParams {
    let mut out = template.clone();
    let mut it = x.iter().copied();
    for t in [&mut out.w1.data, &mut out.b1, &mut out.w2.data, &mut out.b2] {
        t.iter_mut().for_each(|v| *v = it.next().unwrap());
    }
    out
}

/// Checks the refinement backward pass on `L = c . refined_box`.
fn check_refine(seed: u64, n: usize) -> CheckResult {
    let cfg = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(n);
    for _ in 0..n {
        let mut params = RefineParams::init(&cfg, &mut rng);
        params.w2 = Matrix { data: params.w2.data.iter().map(|v| v * 3.0).collect(), ..params.w2 };
        params.b2 = (0..4).map(|_| 0.3 * normal(&mut rng)).collect();
        let emb = random_embedding(&mut rng, cfg.d_emb);
        let geo = GeoDescriptor(std::array::from_fn(|_| 0.5 * normal(&mut rng)));
        let base = random_box(&mut rng, FRAME);
        let c: [f64; 4] = std::array::from_fn(|_| normal(&mut rng));

        let (_, _, cache) = refine_forward_cached(&emb, &geo, &base, &params, FRAME);
        let g = refine_backward(&cache, &params, c);
        let n_p = refine_flat(&params).len();
        let d = cfg.d_emb;
        let mut x = refine_flat(&params);
        x.extend_from_slice(&emb.0);
        x.extend_from_slice(geo.as_slice());
        let mut analytic = refine_flat(&g.params);
        analytic.extend_from_slice(&g.d_embedding);
        analytic.extend_from_slice(&g.d_geo);
        let f = |x: &[f64]| {
            let p = refine_unflat(&params, &x[..n_p]);
            let e = RoiEmbedding(x[n_p..n_p + d].to_vec());
            let gd = GeoDescriptor(std::array::from_fn(|i| x[n_p + d + i]));
            let (_, b, _) = refine_forward_cached(&e, &gd, &base, &p, FRAME);
            dot(&c, &b.to_array())
        };
        reports.push(grad_check_report(f, &x, &analytic, STEP));
    }
    merge("refine_backward", &reports)
}

/// Two-frame, 32x32 sequence with three proposals per frame, all
/// overlapping the target.
fn tiny_sequence(rng: &mut ChaCha8Rng) -> SyntheticSequence {
    let dims = FrameDims::new(32, 32);
    let mut seq = SyntheticSequence { dims, frames: Vec::new(), gt_boxes: Vec::new(), proposals: Vec::new() };
    for t in 0..2 {
        let data = (0..dims.pixels()).map(|_| rng.random::<f32>()).collect();
        seq.frames.push(Frame::gray(dims, data, t));
        let gt = BBox::new(rng.random_range(12.0..20.0), rng.random_range(12.0..20.0), 10.0, 9.0);
        let entries = (0..3)
            .map(|_| Proposal {
                bbox: BBox::new(
                    gt.cx + rng.random_range(-3.0..3.0),
                    gt.cy + rng.random_range(-3.0..3.0),
                    gt.w * rng.random_range(0.8..1.25),
                    gt.h * rng.random_range(0.8..1.25),
                ),
                confidence: rng.random_range(0.1..0.9),
            })
            .collect();
        seq.gt_boxes.push(gt);
        seq.proposals.push(ProposalSet::new(t, 3, entries));
    }
    seq
}

/// Checks the full training step: projections, reranker and refinement
/// together, against the total loss.
fn check_train_step(seed: u64, n: usize, loss: &LossConfig) -> Result<CheckResult> {
    let cfg = ModelConfig { d_emb: 4, n_heads: 2, d_k: 2, hidden: 6, pool: 2, refine_step_bias: 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(n);
    for i in 0..n {
        let data = PreparedSequence::new(tiny_sequence(&mut rng));
        let params = TrackerParams::init(&cfg, seed.wrapping_add(i as u64));
        let out = train_step(&data, 1, 0, &params, loss)?;
        let x = params.flat();
        let f = |x: &[f64]| {
            let mut p = params.clone();
            p.set_flat(x);
            train_step(&data, 1, 0, &p, loss).map(|o| o.bundle.total).unwrap_or(f64::NAN)
        };
        reports.push(grad_check_report(f, &x, &out.grads.flat(), STEP));
    }
    Ok(merge("train_step", &reports))
}

/// Runs every check with `instances` random draws each (the end-to-end
/// training-step check uses a fifth of that, at least one).
pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<CheckResult>> {
    let cfg = LossConfig::default();
    let n = instances.max(1);
    Ok(vec![
        check_logit_loss("ce", seed, n, |i, l| loss_ce(l, i.k_star))?,
        check_logit_loss("geo", seed + 1, n, |i, l| loss_geo(l, &i.set, &i.gt, FRAME, &cfg))?,
        check_logit_loss("rank", seed + 2, n, |i, l| loss_rank(l, &i.set, &i.gt, &cfg))?,
        check_box_loss("dist", seed + 3, n, &cfg, false),
        check_box_loss("scale", seed + 4, n, &cfg, true),
        check_total(seed + 5, n, &cfg)?,
        check_rerank(seed + 6, n)?,
        check_refine(seed + 7, n),
        check_train_step(seed + 8, (n / 5).max(1), &cfg)?,
    ])
}
