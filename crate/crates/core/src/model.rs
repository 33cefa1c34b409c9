//! Learnable heads: the cross-attention reranker and the polar refinement
//! MLP, each with a hand-derived backward pass.
//!
//! Reranker wiring, per head `h` and candidate `k`:
//!
//! ```text
//! alpha[h][k] = softmax_k( (Wq[h] f_r) . (Wk[h] f_k) / sqrt(d_k) )
//! z[k]        = concat_h( alpha[h][k] * Wv[h] f_k )
//! logit[k]    = ws . tanh(Wo z[k]) + b
//! ```

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ProjectionParams, RoiEmbedding};
use crate::geometry::{polar_update, BBox, FrameDims, GeoDescriptor, PolarCorrection};
use crate::linalg::{dot, masked_softmax, sigmoid, Matrix};

/// Bound on the predicted log scale factor (scales stay in [1/2, 2]).
pub const SCALE_LOG_BOUND: f64 = std::f64::consts::LN_2;

/// Refinement step bound as a fraction of the frame diagonal.
pub const D_MAX_FRACTION: f64 = 0.1;

pub const PARAMS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_emb: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub hidden: usize,
    pub pool: usize,
    /// Initial bias of the step-length output; negative values start the
    /// refinement head close to the identity.
    pub refine_step_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d_emb: 64, n_heads: 4, d_k: 16, hidden: 128, pool: 7, refine_step_bias: -4.0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 || self.n_heads == 0 || self.d_k == 0 || self.hidden == 0 || self.pool == 0 {
            return Err(Error::Config("model: all sizes must be positive".into()));
        }
        if !self.refine_step_bias.is_finite() {
            return Err(Error::Config("model: refine_step_bias must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankParams {
    pub wq: Vec<Matrix>,
    pub wk: Vec<Matrix>,
    pub wv: Vec<Matrix>,
    pub wo: Matrix,
    pub ws: Vec<f64>,
    pub bias: Vec<f64>,
}

impl RerankParams {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let heads = |rng: &mut _| (0..cfg.n_heads).map(|_| Matrix::uniform(cfg.d_k, cfg.d_emb, rng)).collect();
        let wq = heads(rng);
        let wk = heads(rng);
        let wv = heads(rng);
        let wo = Matrix::uniform(cfg.d_emb, cfg.n_heads * cfg.d_k, rng);
        let bound = 1.0 / (cfg.d_emb as f64).sqrt();
        let ws = (0..cfg.d_emb).map(|_| rng.random_range(-bound..bound)).collect();
        Self { wq, wk, wv, wo, ws, bias: vec![0.0] }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            wq: self.wq.iter().map(Matrix::zeros_like).collect(),
            wk: self.wk.iter().map(Matrix::zeros_like).collect(),
            wv: self.wv.iter().map(Matrix::zeros_like).collect(),
            wo: self.wo.zeros_like(),
            ws: vec![0.0; self.ws.len()],
            bias: vec![0.0],
        }
    }

    pub fn n_heads(&self) -> usize {
        self.wq.len()
    }

    pub fn d_k(&self) -> usize {
        self.wq[0].rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl RefineParams {
    pub const OUTPUTS: usize = 4;

    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self {
            w1: Matrix::uniform(cfg.hidden, cfg.d_emb + GeoDescriptor::LEN, rng),
            b1: vec![0.0; cfg.hidden],
            w2: Matrix::uniform(Self::OUTPUTS, cfg.hidden, rng),
            b2: vec![0.0, cfg.refine_step_bias, 0.0, 0.0],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: self.w1.zeros_like(),
            b1: vec![0.0; self.b1.len()],
            w2: self.w2.zeros_like(),
            b2: vec![0.0; self.b2.len()],
        }
    }
}

/// One logit per candidate; masked-out entries take no part in softmax or argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct RerankLogits {
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl RerankLogits {
    pub fn all_valid(values: Vec<f64>) -> Self {
        let mask = vec![true; values.len()];
        Self { values, mask }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Valid indices sorted by descending logit, lowest index first on ties.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.mask[i]).collect();
        idx.sort_by(|&a, &b| self.values[b].total_cmp(&self.values[a]).then(a.cmp(&b)));
        idx
    }
}

/// Index of the largest valid logit, lowest index on exact ties.
pub fn rerank_argmax(logits: &RerankLogits) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (&v, &m)) in logits.values.iter().zip(&logits.mask).enumerate() {
        if !m {
            continue;
        }
        match best {
            Some(b) if v <= logits.values[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct RerankCache {
    mask: Vec<bool>,
    q: Vec<Vec<f64>>,
    keys: Vec<Vec<Vec<f64>>>,
    vals: Vec<Vec<Vec<f64>>>,
    alpha: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    t: Vec<Vec<f64>>,
}

pub fn rerank_forward(
    f_r: &RoiEmbedding,
    candidates: &[RoiEmbedding],
    params: &RerankParams,
) -> Result<RerankLogits> {
    let mask = vec![true; candidates.len()];
    rerank_forward_masked(f_r, candidates, &mask, params).map(|(l, _)| l)
}

pub fn rerank_forward_masked(
    f_r: &RoiEmbedding,
    candidates: &[RoiEmbedding],
    mask: &[bool],
    params: &RerankParams,
) -> Result<(RerankLogits, RerankCache)> {
    assert_eq!(mask.len(), candidates.len());
    if !mask.iter().any(|&m| m) {
        return Err(Error::NoProposals);
    }
    let n_heads = params.n_heads();
    let d_k = params.d_k();
    let scale = 1.0 / (d_k as f64).sqrt();
    let n = candidates.len();

    let mut q = Vec::with_capacity(n_heads);
    let mut keys = Vec::with_capacity(n_heads);
    let mut vals = Vec::with_capacity(n_heads);
    let mut alpha = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = params.wq[h].matvec(&f_r.0);
        let kh: Vec<Vec<f64>> = candidates
            .iter()
            .zip(mask)
            .map(|(c, &m)| if m { params.wk[h].matvec(&c.0) } else { vec![0.0; d_k] })
            .collect();
        let vh: Vec<Vec<f64>> = candidates
            .iter()
            .zip(mask)
            .map(|(c, &m)| if m { params.wv[h].matvec(&c.0) } else { vec![0.0; d_k] })
            .collect();
        let energies: Vec<f64> = kh.iter().map(|k| dot(&qh, k) * scale).collect();
        alpha.push(masked_softmax(&energies, mask, 1.0));
        q.push(qh);
        keys.push(kh);
        vals.push(vh);
    }

    let mut z = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for k in 0..n {
        let mut zk = Vec::with_capacity(n_heads * d_k);
        for h in 0..n_heads {
            zk.extend(vals[h][k].iter().map(|v| alpha[h][k] * v));
        }
        let tk: Vec<f64> = params.wo.matvec(&zk).into_iter().map(f64::tanh).collect();
        values.push(dot(&params.ws, &tk) + params.bias[0]);
        z.push(zk);
        t.push(tk);
    }
    let cache = RerankCache { mask: mask.to_vec(), q, keys, vals, alpha, z, t };
    Ok((RerankLogits { values, mask: mask.to_vec() }, cache))
}

#[derive(Debug, Clone)]
pub struct RerankGrads {
    pub params: RerankParams,
    pub d_ref: Vec<f64>,
    pub d_candidates: Vec<Vec<f64>>,
}

/// Gradients of a scalar loss given `d_logits = dL/dlogit`.
pub fn rerank_backward(
    cache: &RerankCache,
    params: &RerankParams,
    f_r: &RoiEmbedding,
    candidates: &[RoiEmbedding],
    d_logits: &[f64],
) -> RerankGrads {
    let n_heads = params.n_heads();
    let d_k = params.d_k();
    let d_emb = f_r.0.len();
    let scale = 1.0 / (d_k as f64).sqrt();
    let n = candidates.len();

    let mut g = params.zeros_like();
    let mut d_ref = vec![0.0; d_emb];
    let mut d_candidates = vec![vec![0.0; d_emb]; n];

    // through the scoring layer into z
    let mut d_z = vec![vec![0.0; n_heads * d_k]; n];
    for k in 0..n {
        if !cache.mask[k] || d_logits[k] == 0.0 {
            continue;
        }
        let gk = d_logits[k];
        g.bias[0] += gk;
        let tk = &cache.t[k];
        let d_u: Vec<f64> = tk
            .iter()
            .zip(&params.ws)
            .map(|(t, w)| gk * w * (1.0 - t * t))
            .collect();
        for (gw, t) in g.ws.iter_mut().zip(tk) {
            *gw += gk * t;
        }
        g.wo.add_outer(&d_u, &cache.z[k]);
        params.wo.matvec_t_acc(&d_u, &mut d_z[k]);
    }

    for h in 0..n_heads {
        let alpha = &cache.alpha[h];
        let mut d_alpha = vec![0.0; n];
        let mut d_v = vec![vec![0.0; d_k]; n];
        for k in 0..n {
            if !cache.mask[k] {
                continue;
            }
            let dz = &d_z[k][h * d_k..(h + 1) * d_k];
            d_alpha[k] = dot(dz, &cache.vals[h][k]);
            for (dv, x) in d_v[k].iter_mut().zip(dz) {
                *dv = alpha[k] * x;
            }
        }
        let inner: f64 = alpha.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
        let mut d_q = vec![0.0; d_k];
        for k in 0..n {
            if !cache.mask[k] {
                continue;
            }
            let d_e = alpha[k] * (d_alpha[k] - inner) * scale;
            let d_key: Vec<f64> = cache.q[h].iter().map(|qv| d_e * qv).collect();
            for (dq, kv) in d_q.iter_mut().zip(&cache.keys[h][k]) {
                *dq += d_e * kv;
            }
            let f = &candidates[k].0;
            g.wk[h].add_outer(&d_key, f);
            g.wv[h].add_outer(&d_v[k], f);
            params.wk[h].matvec_t_acc(&d_key, &mut d_candidates[k]);
            params.wv[h].matvec_t_acc(&d_v[k], &mut d_candidates[k]);
        }
        g.wq[h].add_outer(&d_q, &f_r.0);
        params.wq[h].matvec_t_acc(&d_q, &mut d_ref);
    }

    RerankGrads { params: g, d_ref, d_candidates }
}

#[derive(Debug, Clone)]
pub struct RefineCache {
    x: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    out: [f64; 4],
    corr: PolarCorrection,
    base: BBox,
    unclamped: BBox,
    dims: FrameDims,
    d_max: f64,
}

pub fn d_max(dims: FrameDims) -> f64 {
    D_MAX_FRACTION * dims.diagonal()
}

pub fn refine_forward(
    f_hat: &RoiEmbedding,
    g: &GeoDescriptor,
    base: &BBox,
    params: &RefineParams,
    dims: FrameDims,
) -> (PolarCorrection, BBox) {
    let (c, b, _) = refine_forward_cached(f_hat, g, base, params, dims);
    (c, b)
}

pub fn refine_forward_cached(
    f_hat: &RoiEmbedding,
    g: &GeoDescriptor,
    base: &BBox,
    params: &RefineParams,
    dims: FrameDims,
) -> (PolarCorrection, BBox, RefineCache) {
    let mut x = f_hat.0.clone();
    x.extend_from_slice(g.as_slice());
    let pre: Vec<f64> = params.w1.matvec(&x).iter().zip(&params.b1).map(|(a, b)| a + b).collect();
    let hidden: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
    let o = params.w2.matvec(&hidden);
    let out = [o[0] + params.b2[0], o[1] + params.b2[1], o[2] + params.b2[2], o[3] + params.b2[3]];

    let dm = d_max(dims);
    let corr = PolarCorrection {
        theta: out[0],
        d: dm * sigmoid(out[1]),
        s_w: out[2].clamp(-SCALE_LOG_BOUND, SCALE_LOG_BOUND).exp(),
        s_h: out[3].clamp(-SCALE_LOG_BOUND, SCALE_LOG_BOUND).exp(),
    };
    let unclamped = polar_update(base, &corr);
    let refined = unclamped.clamp_to_frame(dims);
    let cache = RefineCache { x, pre, hidden, out, corr, base: *base, unclamped, dims, d_max: dm };
    (corr, refined, cache)
}

#[derive(Debug, Clone)]
pub struct RefineGrads {
    pub params: RefineParams,
    pub d_embedding: Vec<f64>,
    pub d_geo: [f64; GeoDescriptor::LEN],
}

/// Gradients given `d_box = dL/d(cx, cy, w, h)` of the refined box.
pub fn refine_backward(cache: &RefineCache, params: &RefineParams, d_box: [f64; 4]) -> RefineGrads {
    let [mut gcx, mut gcy, mut gw, mut gh] = d_box;
    let u = &cache.unclamped;
    let (fw, fh) = (cache.dims.width as f64, cache.dims.height as f64);
    if !(0.0..=fw).contains(&u.cx) {
        gcx = 0.0;
    }
    if !(0.0..=fh).contains(&u.cy) {
        gcy = 0.0;
    }
    let raw_w = cache.base.w * cache.corr.s_w;
    let raw_h = cache.base.h * cache.corr.s_h;
    if raw_w < 1.0 {
        gw = 0.0;
    }
    if raw_h < 1.0 {
        gh = 0.0;
    }

    let (sin, cos) = cache.corr.theta.sin_cos();
    let d = cache.corr.d;
    let d_theta = -gcx * d * sin + gcy * d * cos;
    let d_d = gcx * cos + gcy * sin;
    let sig = d / cache.d_max;
    let d_o1 = d_d * cache.d_max * sig * (1.0 - sig);
    let in_range = |o: f64| o > -SCALE_LOG_BOUND && o < SCALE_LOG_BOUND;
    let d_o2 = if in_range(cache.out[2]) { gw * cache.base.w * cache.corr.s_w } else { 0.0 };
    let d_o3 = if in_range(cache.out[3]) { gh * cache.base.h * cache.corr.s_h } else { 0.0 };
    let d_out = [d_theta, d_o1, d_o2, d_o3];

    let mut g = params.zeros_like();
    g.w2.add_outer(&d_out, &cache.hidden);
    g.b2.copy_from_slice(&d_out);
    let mut d_hidden = vec![0.0; cache.hidden.len()];
    params.w2.matvec_t_acc(&d_out, &mut d_hidden);
    let d_pre: Vec<f64> = d_hidden
        .iter()
        .zip(&cache.pre)
        .map(|(d, p)| if *p > 0.0 { *d } else { 0.0 })
        .collect();
    g.w1.add_outer(&d_pre, &cache.x);
    g.b1.copy_from_slice(&d_pre);
    let mut d_x = vec![0.0; cache.x.len()];
    params.w1.matvec_t_acc(&d_pre, &mut d_x);

    let split = d_x.len() - GeoDescriptor::LEN;
    let mut d_geo = [0.0; GeoDescriptor::LEN];
    d_geo.copy_from_slice(&d_x[split..]);
    d_x.truncate(split);
    RefineGrads { params: g, d_embedding: d_x, d_geo }
}

/// Everything the tracker learns.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerParams {
    pub config: ModelConfig,
    pub seed: u64,
    pub proj: ProjectionParams,
    pub rerank: RerankParams,
    pub refine: RefineParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsManifest {
    pub version: u32,
    pub seed: u64,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

impl TrackerParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = ProjectionParams::init(config.pool, config.d_emb, &mut rng);
        let rerank = RerankParams::init(config, &mut rng);
        let refine = RefineParams::init(config, &mut rng);
        Self { config: config.clone(), seed, proj, rerank, refine }
    }

    /// Same shapes, all zeros (including the positional table).
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            seed: self.seed,
            proj: self.proj.zeros_like(),
            rerank: self.rerank.zeros_like(),
            refine: self.refine.zeros_like(),
        }
    }

    /// Every tensor with its name and shape, in file order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        fn mat(name: String, m: &Matrix) -> (String, Vec<usize>, &[f64]) {
            (name, vec![m.rows, m.cols], m.data.as_slice())
        }
        for (s, m) in self.proj.levels.iter().enumerate() {
            out.push(mat(format!("proj.level{s}"), m));
        }
        out.push(("proj.posenc".into(), vec![self.proj.posenc.len()], &self.proj.posenc));
        for (kind, mats) in [("wq", &self.rerank.wq), ("wk", &self.rerank.wk), ("wv", &self.rerank.wv)] {
            for (h, m) in mats.iter().enumerate() {
                out.push(mat(format!("rerank.{kind}{h}"), m));
            }
        }
        out.push(mat("rerank.wo".into(), &self.rerank.wo));
        out.push(("rerank.ws".into(), vec![self.rerank.ws.len()], &self.rerank.ws));
        out.push(("rerank.bias".into(), vec![1], &self.rerank.bias));
        out.push(mat("refine.w1".into(), &self.refine.w1));
        out.push(("refine.b1".into(), vec![self.refine.b1.len()], &self.refine.b1));
        out.push(mat("refine.w2".into(), &self.refine.w2));
        out.push(("refine.b2".into(), vec![self.refine.b2.len()], &self.refine.b2));
        out
    }

    fn all_tensors_mut(&mut self) -> Vec<(bool, &mut [f64])> {
        let mut out: Vec<(bool, &mut [f64])> = Vec::new();
        for m in self.proj.levels.iter_mut() {
            out.push((true, &mut m.data));
        }
        out.push((false, &mut self.proj.posenc));
        let r = &mut self.rerank;
        for m in r.wq.iter_mut().chain(r.wk.iter_mut()).chain(r.wv.iter_mut()) {
            out.push((true, &mut m.data));
        }
        out.push((true, &mut r.wo.data));
        out.push((true, &mut r.ws));
        out.push((true, &mut r.bias));
        let f = &mut self.refine;
        out.push((true, &mut f.w1.data));
        out.push((true, &mut f.b1));
        out.push((true, &mut f.w2.data));
        out.push((true, &mut f.b2));
        out
    }

    /// Trainable tensors; the fixed positional table is excluded.
    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        self.all_tensors_mut().into_iter().filter(|(t, _)| *t).map(|(_, s)| s).collect()
    }

    pub fn trainable(&self) -> Vec<&[f64]> {
        self.named_tensors()
            .into_iter()
            .filter(|(n, _, _)| n != "proj.posenc")
            .map(|(_, _, s)| s)
            .collect()
    }

    /// Flattened trainable values in file order.
    pub fn flat(&self) -> Vec<f64> {
        self.trainable().into_iter().flatten().copied().collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for t in self.trainable_mut() {
            for v in t.iter_mut() {
                *v = *it.next().expect("flat vector too short");
            }
        }
        assert!(it.next().is_none(), "flat vector too long");
    }

    pub fn n_trainable(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    /// `self += alpha * other`, trainable tensors only.
    pub fn add_scaled(&mut self, alpha: f64, other: &TrackerParams) {
        for (dst, src) in self.trainable_mut().into_iter().zip(other.trainable()) {
            crate::linalg::axpy(alpha, src, dst);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn manifest(&self) -> ParamsManifest {
        let mut offset = 0;
        let tensors = self
            .named_tensors()
            .into_iter()
            .map(|(name, shape, data)| {
                let e = TensorEntry { name, shape, offset, len: data.len() };
                offset += data.len();
                e
            })
            .collect();
        ParamsManifest {
            version: PARAMS_FORMAT_VERSION,
            seed: self.seed,
            config: self.config.clone(),
            tensors,
        }
    }

    /// Little-endian f32 values, every tensor in manifest order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        for (_, _, t) in self.named_tensors() {
            for v in t {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        buf
    }

    /// Writes `<stem>.bin` and `<stem>.json`.
    pub fn save(&self, bin_path: impl AsRef<Path>) -> Result<()> {
        let bin_path = bin_path.as_ref();
        std::fs::write(bin_path, self.to_bytes())?;
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        let mut f = std::fs::File::create(bin_path.with_extension("json"))?;
        f.write_all(manifest.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(bin_path: impl AsRef<Path>) -> Result<Self> {
        let bin_path = bin_path.as_ref();
        let manifest: ParamsManifest =
            serde_json::from_str(&std::fs::read_to_string(bin_path.with_extension("json"))?)?;
        if manifest.version != PARAMS_FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported parameter file version {}",
                manifest.version
            )));
        }
        let bytes = std::fs::read(bin_path)?;
        Self::from_bytes(&manifest, &bytes)
    }

    pub fn from_bytes(manifest: &ParamsManifest, bytes: &[u8]) -> Result<Self> {
        let mut params = Self::init(&manifest.config, manifest.seed);
        let expected = params.manifest();
        if expected.tensors != manifest.tensors {
            return Err(Error::InvalidArgument("parameter manifest does not match model shapes".into()));
        }
        let total: usize = manifest.tensors.iter().map(|t| t.len).sum();
        if bytes.len() != total * 4 {
            return Err(Error::InvalidArgument(format!(
                "parameter file has {} bytes, expected {}",
                bytes.len(),
                total * 4
            )));
        }
        let mut values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        for (_, t) in params.all_tensors_mut() {
            for v in t.iter_mut() {
                *v = values.next().unwrap();
            }
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::grad_check;

    fn small_cfg() -> ModelConfig {
        ModelConfig { d_emb: 8, n_heads: 2, d_k: 3, hidden: 10, pool: 2, refine_step_bias: 0.0 }
    }

    fn random_emb(rng: &mut impl Rng, d: usize) -> RoiEmbedding {
        RoiEmbedding((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn argmax_rules() {
        assert_eq!(rerank_argmax(&RerankLogits::all_valid(vec![0.2])), Some(0));
        assert_eq!(rerank_argmax(&RerankLogits::all_valid(vec![0.1, 0.9, 0.3])), Some(1));
        assert_eq!(rerank_argmax(&RerankLogits::all_valid(vec![0.5, 0.5])), Some(0));
        let masked = RerankLogits { values: vec![5.0, 1.0, 2.0], mask: vec![false, true, true] };
        assert_eq!(rerank_argmax(&masked), Some(2));
        assert_eq!(masked.ranking(), vec![2, 1]);
    }

    #[test]
    fn empty_candidates_fail() {
        let cfg = small_cfg();
        let p = TrackerParams::init(&cfg, 0);
        let f = RoiEmbedding(vec![0.0; cfg.d_emb]);
        assert!(matches!(rerank_forward(&f, &[], &p.rerank), Err(Error::NoProposals)));
    }

    #[test]
    fn identical_candidate_wins_with_identity_maps() {
        let d = 8;
        let cfg = ModelConfig { d_emb: d, n_heads: 2, d_k: 4, hidden: 4, pool: 1, refine_step_bias: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = RerankParams::init(&cfg, &mut rng);
        for h in 0..2 {
            for m in [&mut p.wq[h], &mut p.wk[h], &mut p.wv[h]] {
                *m = Matrix::zeros(4, d);
                for i in 0..4 {
                    m.data[i * d + h * 4 + i] = 1.0;
                }
            }
        }
        p.wo = Matrix::zeros(d, d);
        for i in 0..d {
            p.wo.data[i * d + i] = 1.0;
        }
        p.ws = vec![1.0; d];
        for trial in 0..20 {
            let f_r = RoiEmbedding((0..d).map(|_| rng.random_range(0.8..1.0)).collect());
            let mut cands: Vec<RoiEmbedding> =
                (0..6).map(|_| RoiEmbedding((0..d).map(|_| rng.random_range(0.0..0.5)).collect())).collect();
            let slot = trial % 7;
            cands.insert(slot, f_r.clone());
            let logits = rerank_forward(&f_r, &cands, &p).unwrap();
            assert_eq!(rerank_argmax(&logits), Some(slot));
        }
    }

    #[test]
    fn rerank_is_permutation_equivariant() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = RerankParams::init(&cfg, &mut rng);
        for _ in 0..20 {
            let f_r = random_emb(&mut rng, cfg.d_emb);
            let cands: Vec<_> = (0..5).map(|_| random_emb(&mut rng, cfg.d_emb)).collect();
            let perm = [3usize, 0, 4, 1, 2];
            let permuted: Vec<_> = perm.iter().map(|&i| cands[i].clone()).collect();
            let a = rerank_forward(&f_r, &cands, &p).unwrap();
            let b = rerank_forward(&f_r, &permuted, &p).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                assert!((a.values[i] - b.values[j]).abs() < 1e-12);
            }
            assert_eq!(perm[rerank_argmax(&b).unwrap()], rerank_argmax(&a).unwrap());
        }
    }

    #[test]
    fn all_zero_refine_moves_half_dmax_right() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = RefineParams::init(&cfg, &mut rng).zeros_like();
        let dims = FrameDims::new(300, 400);
        let base = BBox::new(100.0, 100.0, 30.0, 20.0);
        let f = random_emb(&mut rng, cfg.d_emb);
        let g = crate::geometry::geo_descriptor(&base, &base, dims);
        let (corr, out) = refine_forward(&f, &g, &base, &p, dims);
        assert_eq!(corr.d, 25.0); // 0.1 * 500 / 2
        assert_eq!((corr.s_w, corr.s_h), (1.0, 1.0));
        assert_eq!(out, BBox::new(125.0, 100.0, 30.0, 20.0));
    }

    #[test]
    fn scale_output_saturates() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = RefineParams::init(&cfg, &mut rng).zeros_like();
        p.b2[2] = 1e6;
        p.b2[3] = -1e6;
        let dims = FrameDims::new(300, 400);
        let base = BBox::new(100.0, 100.0, 30.0, 20.0);
        let f = random_emb(&mut rng, cfg.d_emb);
        let g = crate::geometry::geo_descriptor(&base, &base, dims);
        let (corr, _) = refine_forward(&f, &g, &base, &p, dims);
        assert!((corr.s_w - 2.0).abs() < 1e-12);
        assert!((corr.s_h - 0.5).abs() < 1e-12);
    }

    #[test]
    fn refine_output_is_polar_update_of_correction() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = FrameDims::new(320, 192);
        for _ in 0..20 {
            let p = RefineParams::init(&cfg, &mut rng);
            let base = BBox::new(rng.random_range(40.0..280.0), rng.random_range(40.0..150.0), 30.0, 25.0);
            let r = BBox::new(base.cx + 5.0, base.cy - 3.0, 28.0, 26.0);
            let f = random_emb(&mut rng, cfg.d_emb);
            let g = crate::geometry::geo_descriptor(&base, &r, dims);
            let (corr, out) = refine_forward(&f, &g, &base, &p, dims);
            assert_eq!(out, polar_update(&base, &corr).clamp_to_frame(dims));
            assert!((0.5..=2.0).contains(&corr.s_w) && (0.5..=2.0).contains(&corr.s_h));
            assert!(corr.d >= 0.0 && corr.d <= d_max(dims));
        }
    }

    fn rerank_loss(logits: &[f64], weights: &[f64]) -> f64 {
        logits.iter().zip(weights).map(|(l, w)| l * w).sum()
    }

    #[test]
    fn rerank_backward_matches_finite_differences() {
        let cfg = small_cfg();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut p = RerankParams::init(&cfg, &mut rng);
            p.bias[0] = 0.3;
            let f_r = random_emb(&mut rng, cfg.d_emb);
            let cands: Vec<_> = (0..4).map(|_| random_emb(&mut rng, cfg.d_emb)).collect();
            let mask = vec![true, false, true, true];
            let w: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, cache) = rerank_forward_masked(&f_r, &cands, &mask, &p).unwrap();
            let masked_w: Vec<f64> = w.iter().zip(&mask).map(|(w, &m)| if m { *w } else { 0.0 }).collect();
            let grads = rerank_backward(&cache, &p, &f_r, &cands, &masked_w);

            // wrt the reference embedding
            let f = |x: &[f64]| {
                let (l, _) = rerank_forward_masked(&RoiEmbedding(x.to_vec()), &cands, &mask, &p).unwrap();
                rerank_loss(&l.values, &masked_w)
            };
            let err = grad_check(f, &f_r.0, &grads.d_ref, 1e-5);
            assert!(err < 1e-4, "d_ref rel err {err}");

            // wrt a valid candidate, and zero for the masked one
            let f = |x: &[f64]| {
                let mut c = cands.clone();
                c[2] = RoiEmbedding(x.to_vec());
                let (l, _) = rerank_forward_masked(&f_r, &c, &mask, &p).unwrap();
                rerank_loss(&l.values, &masked_w)
            };
            let err = grad_check(f, &cands[2].0, &grads.d_candidates[2], 1e-5);
            assert!(err < 1e-4, "d_cand rel err {err}");
            assert!(grads.d_candidates[1].iter().all(|&v| v == 0.0));

            // wrt one matrix of each kind
            let check = |get: &dyn Fn(&RerankParams) -> &[f64],
                         set: &dyn Fn(&mut RerankParams) -> &mut [f64],
                         analytic: &[f64]| {
                let f = |x: &[f64]| {
                    let mut q = p.clone();
                    set(&mut q).copy_from_slice(x);
                    let (l, _) = rerank_forward_masked(&f_r, &cands, &mask, &q).unwrap();
                    rerank_loss(&l.values, &masked_w)
                };
                grad_check(f, get(&p), analytic, 1e-5)
            };
            assert!(check(&|p| &p.wq[1].data, &|p| &mut p.wq[1].data, &grads.params.wq[1].data) < 1e-4);
            assert!(check(&|p| &p.wk[0].data, &|p| &mut p.wk[0].data, &grads.params.wk[0].data) < 1e-4);
            assert!(check(&|p| &p.wv[1].data, &|p| &mut p.wv[1].data, &grads.params.wv[1].data) < 1e-4);
            assert!(check(&|p| &p.wo.data, &|p| &mut p.wo.data, &grads.params.wo.data) < 1e-4);
            assert!(check(&|p| &p.ws, &|p| &mut p.ws, &grads.params.ws) < 1e-4);
            assert!(check(&|p| &p.bias, &|p| &mut p.bias, &grads.params.bias) < 1e-4);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = TrackerParams::init(&cfg, 4);
        let f_r = random_emb(&mut rng, cfg.d_emb);
        let cands: Vec<_> = (0..3).map(|_| random_emb(&mut rng, cfg.d_emb)).collect();
        let (_, cache) = rerank_forward_masked(&f_r, &cands, &[true; 3], &p.rerank).unwrap();
        let g = rerank_backward(&cache, &p.rerank, &f_r, &cands, &[0.0; 3]);
        assert!(g.d_ref.iter().chain(g.d_candidates.iter().flatten()).all(|&v| v == 0.0));
        assert!(g.params.wq.iter().chain(&g.params.wk).chain(&g.params.wv).all(|m| m.data.iter().all(|&v| v == 0.0)));

        let dims = FrameDims::new(100, 80);
        let base = BBox::new(50.0, 40.0, 20.0, 10.0);
        let geo = crate::geometry::geo_descriptor(&base, &base, dims);
        let (_, _, cache) = refine_forward_cached(&f_r, &geo, &base, &p.refine, dims);
        let g = refine_backward(&cache, &p.refine, [0.0; 4]);
        assert!(g.params.w1.data.iter().chain(&g.params.w2.data).all(|&v| v == 0.0));
    }

    #[test]
    fn refine_backward_matches_finite_differences() {
        let cfg = small_cfg();
        let dims = FrameDims::new(160, 120);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let mut p = RefineParams::init(&cfg, &mut rng);
            p.b1.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
            let base = BBox::new(80.0, 60.0, 24.0, 18.0);
            let r = BBox::new(75.0, 64.0, 20.0, 20.0);
            let f = random_emb(&mut rng, cfg.d_emb);
            let geo = crate::geometry::geo_descriptor(&base, &r, dims);
            let up: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let (_, _, cache) = refine_forward_cached(&f, &geo, &base, &p, dims);
            let g = refine_backward(&cache, &p, up);
            let loss = |b: BBox| b.to_array().iter().zip(&up).map(|(x, u)| x * u).sum::<f64>();

            let fe = |x: &[f64]| loss(refine_forward(&RoiEmbedding(x.to_vec()), &geo, &base, &p, dims).1);
            assert!(grad_check(fe, &f.0, &g.d_embedding, 1e-5) < 1e-4);
            let fg = |x: &[f64]| {
                let gd = GeoDescriptor(x.try_into().unwrap());
                loss(refine_forward(&f, &gd, &base, &p, dims).1)
            };
            assert!(grad_check(fg, &geo.0, &g.d_geo, 1e-5) < 1e-4);
            let fw = |x: &[f64]| {
                let mut q = p.clone();
                q.w1.data.copy_from_slice(x);
                loss(refine_forward(&f, &geo, &base, &q, dims).1)
            };
            assert!(grad_check(fw, &p.w1.data, &g.params.w1.data, 1e-5) < 1e-4);
            let fb = |x: &[f64]| {
                let mut q = p.clone();
                q.b2.copy_from_slice(x);
                loss(refine_forward(&f, &geo, &base, &q, dims).1)
            };
            assert!(grad_check(fb, &p.b2, &g.params.b2, 1e-5) < 1e-4);
        }
    }

    #[test]
    fn params_round_trip_through_files() {
        let cfg = small_cfg();
        let p = TrackerParams::init(&cfg, 42);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        p.save(&path).unwrap();
        let q = TrackerParams::load(&path).unwrap();
        assert_eq!(q.manifest(), p.manifest());
        for ((_, _, a), (_, _, b)) in p.named_tensors().iter().zip(q.named_tensors().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        // loading an f32-exact file and saving again is byte-identical
        let path2 = dir.path().join("again.bin");
        q.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn flat_round_trip() {
        let p = TrackerParams::init(&small_cfg(), 5);
        let mut q = p.zeros_like();
        q.proj.posenc = p.proj.posenc.clone();
        q.set_flat(&p.flat());
        assert_eq!(p, q);
        assert_eq!(p.flat().len(), p.n_trainable());
    }
}
