//! Synthetic scenes and a detector stand-in.
//!
//! Frames show a Gaussian blob (the attention target) and flat rectangles
//! (distractors) on a faint noisy background. Each frame gets a Top-K
//! proposal list: a jittered copy of the target box, a few near-miss boxes
//! around it, one box per distractor, and random background boxes. With
//! probability `corruption_rate` one distractor is promoted above the target
//! in confidence, so confidence order is unreliable while recall stays high.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Frame;
use crate::geometry::{argmax_by, argmin_by, center_error, iou, BBox, FrameDims};
use crate::labels::{parse_label_file, LabelRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub confidence: f64,
}

/// Top-K candidate boxes for one frame, highest confidence first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub frame: usize,
    pub capacity: usize,
    pub entries: Vec<Proposal>,
}

impl ProposalSet {
    pub fn new(frame: usize, capacity: usize, mut entries: Vec<Proposal>) -> Self {
        entries.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        entries.truncate(capacity);
        Self { frame, capacity, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.entries.iter().map(|p| p.bbox).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionModel {
    Linear,
    RandomWalk,
    Teleport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Filled from the run's master seed; not part of the config file.
    #[serde(skip)]
    pub seed: u64,
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
    pub motion: MotionModel,
    /// Target speed in pixels per frame.
    pub speed: f64,
    /// Per-frame jump probability under `teleport`.
    pub teleport_prob: f64,
    pub target_w: f64,
    pub target_h: f64,
    pub n_distractors: usize,
    pub n_near_miss: usize,
    /// Fill the remaining slots up to `k` with random background boxes.
    pub fill_random: bool,
    /// Std-dev of proposal center jitter, pixels.
    pub center_jitter: f64,
    /// Std-dev of proposal log-size jitter.
    pub size_jitter: f64,
    pub corruption_rate: f64,
    pub recall_floor: f64,
    /// Per-frame probability that a 1-3 frame occlusion starts.
    pub occlusion_prob: f64,
    pub k: usize,
    pub noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_frames: 500,
            width: 320,
            height: 192,
            motion: MotionModel::RandomWalk,
            speed: 3.0,
            teleport_prob: 0.02,
            target_w: 40.0,
            target_h: 36.0,
            n_distractors: 3,
            n_near_miss: 2,
            fill_random: true,
            center_jitter: 3.0,
            size_jitter: 0.08,
            corruption_rate: 0.5,
            recall_floor: 0.97,
            occlusion_prob: 0.01,
            k: 10,
            noise: 0.03,
        }
    }
}

impl SceneConfig {
    pub fn dims(&self) -> FrameDims {
        FrameDims::new(self.width, self.height)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene: {m}")));
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return bad("corruption_rate must lie in [0, 1]");
        }
        if !(self.recall_floor > 0.0 && self.recall_floor <= 1.0) {
            return bad("recall_floor must lie in (0, 1]");
        }
        if self.k < 2 {
            return bad("k must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) || !(0.0..=1.0).contains(&self.teleport_prob) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.width < 16 || self.height < 16 {
            return bad("frame must be at least 16x16");
        }
        if !(self.target_w >= 4.0 && self.target_h >= 4.0)
            || self.target_w * 2.0 > self.width as f64
            || self.target_h * 2.0 > self.height as f64
        {
            return bad("target size must be at least 4 px and at most half the frame");
        }
        if self.center_jitter < 0.0 || self.size_jitter < 0.0 || self.speed < 0.0 || self.noise < 0.0 {
            return bad("jitter, speed and noise must be non-negative");
        }
        Ok(())
    }
}

/// Frames, per-frame target boxes and proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub dims: FrameDims,
    pub frames: Vec<Frame>,
    /// One target box per frame; empty when labels are unavailable.
    pub gt_boxes: Vec<BBox>,
    pub proposals: Vec<ProposalSet>,
}

impl SyntheticSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn has_labels(&self) -> bool {
        !self.gt_boxes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.proposals.iter().map(|p| p.capacity).max().unwrap_or(0)
    }
}

/// A moving object that bounces off the frame border.
#[derive(Debug, Clone)]
struct Mover {
    bbox: BBox,
    vx: f64,
    vy: f64,
}

impl Mover {
    fn spawn(rng: &mut ChaCha8Rng, dims: FrameDims, w: f64, h: f64, speed: f64) -> Self {
        let cx = rng.random_range(w / 2.0..dims.width as f64 - w / 2.0);
        let cy = rng.random_range(h / 2.0..dims.height as f64 - h / 2.0);
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        Self { bbox: BBox::new(cx, cy, w, h), vx: speed * a.cos(), vy: speed * a.sin() }
    }

    fn step(&mut self, dims: FrameDims) {
        let b = &mut self.bbox;
        b.cx += self.vx;
        b.cy += self.vy;
        let (lo_x, hi_x) = (b.w / 2.0, dims.width as f64 - b.w / 2.0);
        let (lo_y, hi_y) = (b.h / 2.0, dims.height as f64 - b.h / 2.0);
        if b.cx < lo_x || b.cx > hi_x {
            self.vx = -self.vx;
            b.cx = b.cx.clamp(lo_x, hi_x);
        }
        if b.cy < lo_y || b.cy > hi_y {
            self.vy = -self.vy;
            b.cy = b.cy.clamp(lo_y, hi_y);
        }
    }
}

fn render(
    dims: FrameDims,
    target: Option<&BBox>,
    distractors: &[(BBox, f32)],
    noise: f64,
    rng: &mut ChaCha8Rng,
    index: usize,
) -> Frame {
    let (w, h) = (dims.width, dims.height);
    let mut data = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let base = 0.1 + 0.05 * (x as f32 / w as f32) + 0.03 * (y as f32 / h as f32);
            data[y * w + x] = base + (noise * rng.random_range(-1.0..1.0)) as f32;
        }
    }
    for (b, level) in distractors {
        let (x0, y0, x1, y1) = b.corners();
        let xs = (x0.max(0.0).round() as usize)..(x1.min(w as f64).round() as usize);
        let ys = (y0.max(0.0).round() as usize)..(y1.min(h as f64).round() as usize);
        for y in ys {
            for x in xs.clone() {
                data[y * w + x] = *level;
            }
        }
    }
    if let Some(t) = target {
        let (sx, sy) = (t.w / 4.0, t.h / 4.0);
        let (x0, y0, x1, y1) = t.corners();
        let pad = |v: f64, lim: usize| v.clamp(0.0, lim as f64) as usize;
        for y in pad(y0 - t.h, h)..pad(y1 + t.h, h) {
            for x in pad(x0 - t.w, w)..pad(x1 + t.w, w) {
                let dx = (x as f64 - t.cx) / sx;
                let dy = (y as f64 - t.cy) / sy;
                let g = 0.85 * (-0.5 * (dx * dx + dy * dy)).exp();
                let px = &mut data[y * w + x];
                *px = (*px as f64 + g) as f32;
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Frame::gray(dims, data, index)
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox, center: f64, size: f64, dims: FrameDims) -> BBox {
    let nc = Normal::new(0.0, center.max(f64::MIN_POSITIVE)).unwrap();
    let ns = Normal::new(0.0, size.max(f64::MIN_POSITIVE)).unwrap();
    let (dx, dy) = if center > 0.0 { (nc.sample(rng), nc.sample(rng)) } else { (0.0, 0.0) };
    let (sw, sh) = if size > 0.0 { (ns.sample(rng).exp(), ns.sample(rng).exp()) } else { (1.0, 1.0) };
    BBox::new(b.cx + dx, b.cy + dy, b.w * sw, b.h * sh).clamp_to_frame(dims)
}

/// Deterministic in `cfg` (including its seed).
pub fn generate(cfg: &SceneConfig) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let dims = cfg.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut target = Mover::spawn(&mut rng, dims, cfg.target_w, cfg.target_h, cfg.speed);
    let mut distractors: Vec<(Mover, f32)> = (0..cfg.n_distractors)
        .map(|_| {
            let w = cfg.target_w * rng.random_range(0.7..1.3);
            let h = cfg.target_h * rng.random_range(0.7..1.3);
            let level = rng.random_range(0.45..0.9) as f32;
            (Mover::spawn(&mut rng, dims, w, h, cfg.speed * 0.7), level)
        })
        .collect();
    let walk = Normal::new(0.0, (cfg.speed * 0.3).max(f64::MIN_POSITIVE)).unwrap();

    let mut seq = SyntheticSequence {
        dims,
        frames: Vec::with_capacity(cfg.n_frames),
        gt_boxes: Vec::with_capacity(cfg.n_frames),
        proposals: Vec::with_capacity(cfg.n_frames),
    };
    let mut occluded_for = 0usize;
    for t in 0..cfg.n_frames {
        if t > 0 {
            match cfg.motion {
                MotionModel::Linear => {}
                MotionModel::RandomWalk => {
                    target.vx += walk.sample(&mut rng);
                    target.vy += walk.sample(&mut rng);
                    let s = target.vx.hypot(target.vy);
                    if s > 2.0 * cfg.speed && s > 0.0 {
                        target.vx *= 2.0 * cfg.speed / s;
                        target.vy *= 2.0 * cfg.speed / s;
                    }
                }
                MotionModel::Teleport => {
                    if rng.random_bool(cfg.teleport_prob) {
                        let fresh = Mover::spawn(&mut rng, dims, cfg.target_w, cfg.target_h, cfg.speed);
                        target.bbox = fresh.bbox;
                    }
                }
            }
            target.step(dims);
            for (d, _) in &mut distractors {
                d.step(dims);
            }
        }
        if occluded_for > 0 {
            occluded_for -= 1;
        } else if t > 0 && rng.random_bool(cfg.occlusion_prob) {
            occluded_for = rng.random_range(1..=3);
        }
        let occluded = occluded_for > 0;
        let gt = target.bbox;
        let dboxes: Vec<(BBox, f32)> = distractors.iter().map(|(m, l)| (m.bbox, *l)).collect();
        seq.frames.push(render(dims, (!occluded).then_some(&gt), &dboxes, cfg.noise, &mut rng, t));
        seq.gt_boxes.push(gt);

        let mut entries = Vec::with_capacity(cfg.k);
        let aligned_present = !occluded && rng.random_bool(cfg.recall_floor);
        if aligned_present {
            let b = jitter(&mut rng, &gt, cfg.center_jitter, cfg.size_jitter, dims);
            entries.push(Proposal { bbox: b, confidence: rng.random_range(0.75..0.95) });
        }
        if !occluded {
            for _ in 0..cfg.n_near_miss {
                let off = BBox::new(
                    gt.cx + gt.w * rng.random_range(-0.5..0.5),
                    gt.cy + gt.h * rng.random_range(-0.5..0.5),
                    gt.w,
                    gt.h,
                );
                let b = jitter(&mut rng, &off, 0.0, cfg.size_jitter * 2.0, dims);
                entries.push(Proposal { bbox: b, confidence: rng.random_range(0.4..0.7) });
            }
        }
        let first_distractor = entries.len();
        for (d, _) in &dboxes {
            let b = jitter(&mut rng, d, cfg.center_jitter, cfg.size_jitter, dims);
            entries.push(Proposal { bbox: b, confidence: rng.random_range(0.3..0.7) });
        }
        let n_distr = entries.len() - first_distractor;
        if aligned_present && n_distr > 0 && rng.random_bool(cfg.corruption_rate) {
            let pick = first_distractor + rng.random_range(0..n_distr);
            let high = rng.random_range(0.8..0.97);
            entries[pick].confidence = high;
            entries[0].confidence = high * rng.random_range(0.5..0.95);
        }
        if cfg.fill_random {
            while entries.len() < cfg.k {
                let w = cfg.target_w * rng.random_range(0.6..1.4);
                let h = cfg.target_h * rng.random_range(0.6..1.4);
                let cx = rng.random_range(w / 2.0..dims.width as f64 - w / 2.0);
                let cy = rng.random_range(h / 2.0..dims.height as f64 - h / 2.0);
                entries.push(Proposal { bbox: BBox::new(cx, cy, w, h), confidence: rng.random_range(0.05..0.3) });
            }
        }
        seq.proposals.push(ProposalSet::new(t, cfg.k, entries));
    }
    Ok(seq)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchCriterion {
    /// Center error at most this many pixels.
    CenterError(f64),
    /// IoU at least this value.
    Iou(f64),
}

impl MatchCriterion {
    fn qualifies(&self, b: &BBox, gt: &BBox) -> bool {
        match *self {
            MatchCriterion::CenterError(th) => center_error(b, gt) <= th,
            MatchCriterion::Iou(th) => iou(b, gt) >= th,
        }
    }

    /// Oracle-best proposal under this criterion (MinErr or MaxIoU).
    fn best(&self, set: &ProposalSet, gt: &BBox) -> Option<usize> {
        match self {
            MatchCriterion::CenterError(_) => argmin_by(&set.entries, |p| center_error(&p.bbox, gt)),
            MatchCriterion::Iou(_) => argmax_by(&set.entries, |p| iou(&p.bbox, gt)),
        }
    }
}

/// Per-frame proposal order by confidence (the emission order).
pub fn confidence_rankings(seq: &SyntheticSequence) -> Vec<Vec<usize>> {
    seq.proposals.iter().map(|p| (0..p.len()).collect()).collect()
}

/// Fraction of frames whose oracle-best proposal qualifies under `criterion`
/// and sits within the first `k` entries of that frame's ranking.
pub fn recall_at_k(
    seq: &SyntheticSequence,
    rankings: &[Vec<usize>],
    k: usize,
    criterion: MatchCriterion,
) -> Result<f64> {
    if !seq.has_labels() {
        return Err(Error::InvalidArgument("recall needs ground-truth boxes".into()));
    }
    if rankings.len() != seq.len() {
        return Err(Error::SequenceMismatch(format!(
            "{} rankings for {} frames",
            rankings.len(),
            seq.len()
        )));
    }
    if seq.is_empty() {
        return Ok(0.0);
    }
    let hits = seq
        .proposals
        .iter()
        .zip(&seq.gt_boxes)
        .zip(rankings)
        .filter(|((set, gt), ranking)| match criterion.best(set, gt) {
            Some(best) => {
                criterion.qualifies(&set.entries[best].bbox, gt) && ranking.iter().take(k).any(|&i| i == best)
            }
            None => false,
        })
        .count();
    Ok(hits as f64 / seq.len() as f64)
}

/// On-disk sequence header, stored as `sequence.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceHeader {
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    pub capacity: usize,
}

pub fn frame_name(t: usize) -> String {
    format!("{t:06}")
}

fn label_line(b: &BBox, dims: FrameDims) -> String {
    let (w, h) = (dims.width as f64, dims.height as f64);
    format!("0 {:.6} {:.6} {:.6} {:.6}", b.cx / w, b.cy / h, b.w / w, b.h / h)
}

/// Writes `frames/*.png`, `labels/*.txt`, `proposals/*.txt` and
/// `sequence.toml` under `dir`.
pub fn export_sequence(seq: &SyntheticSequence, dir: &Path) -> Result<()> {
    for sub in ["frames", "labels", "proposals"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    let header = SequenceHeader {
        width: seq.dims.width,
        height: seq.dims.height,
        n_frames: seq.len(),
        capacity: seq.capacity(),
    };
    std::fs::write(dir.join("sequence.toml"), toml::to_string(&header).map_err(|e| Error::Config(e.to_string()))?)?;
    for (t, frame) in seq.frames.iter().enumerate() {
        let name = frame_name(t);
        frame.save_png(dir.join("frames").join(format!("{name}.png")))?;
        if let Some(gt) = seq.gt_boxes.get(t) {
            std::fs::write(dir.join("labels").join(format!("{name}.txt")), label_line(gt, seq.dims) + "\n")?;
        }
        let mut text = String::new();
        for p in &seq.proposals[t].entries {
            writeln!(text, "{} {:.6}", label_line(&p.bbox, seq.dims), p.confidence).unwrap();
        }
        std::fs::write(dir.join("proposals").join(format!("{name}.txt")), text)?;
    }
    Ok(())
}

fn parse_proposals(path: &Path, t: usize, dims: FrameDims, capacity: usize) -> Result<ProposalSet> {
    let text = std::fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { file: path.to_path_buf(), line: i + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", fields.len())));
        }
        let rec = LabelRecord::parse_fields(&fields[..5]).map_err(err)?;
        let confidence: f64 = fields[5].parse().map_err(|_| err(format!("bad confidence {:?}", fields[5])))?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(err(format!("confidence {confidence} outside [0, 1]")));
        }
        entries.push(Proposal { bbox: rec.to_pixels(dims), confidence });
    }
    Ok(ProposalSet::new(t, capacity.max(entries.len()), entries))
}

/// Reads a directory written by [`export_sequence`]. Labels are optional.
pub fn import_sequence(dir: &Path) -> Result<SyntheticSequence> {
    let header_path = dir.join("sequence.toml");
    let header: SequenceHeader = toml::from_str(&std::fs::read_to_string(&header_path)?)
        .map_err(|e| Error::Parse { file: header_path.clone(), line: 0, msg: e.to_string() })?;
    let dims = FrameDims::new(header.width, header.height);
    let labels_dir = dir.join("labels");
    let with_labels = labels_dir.is_dir();
    let mut seq = SyntheticSequence { dims, frames: Vec::new(), gt_boxes: Vec::new(), proposals: Vec::new() };
    for t in 0..header.n_frames {
        let name = frame_name(t);
        let frame = Frame::load_png(dir.join("frames").join(format!("{name}.png")), t)?;
        if frame.dims != dims {
            return Err(Error::ResolutionMismatch {
                got_w: frame.dims.width,
                got_h: frame.dims.height,
                want_w: dims.width,
                want_h: dims.height,
            });
        }
        seq.frames.push(frame);
        if with_labels {
            let path = labels_dir.join(format!("{name}.txt"));
            let recs = parse_label_file(&path)?;
            let first = recs.first().ok_or_else(|| Error::Parse {
                file: path.clone(),
                line: 0,
                msg: "frame has no target label".into(),
            })?;
            seq.gt_boxes.push(first.to_pixels(dims));
        }
        let ppath = dir.join("proposals").join(format!("{name}.txt"));
        seq.proposals.push(parse_proposals(&ppath, t, dims, header.capacity)?);
    }
    Ok(seq)
}
