//! Dense attention heatmaps from box annotations.
//!
//! Each box becomes a peak-normalized anisotropic Gaussian (truncated at
//! ±3σ). Per-frame densities are accumulated with exponential decay,
//! smoothed, and normalized against a high percentile so the output lies in
//! `[0, 1]`. Pixel `(x, y)` is evaluated at integer coordinates `(x, y)`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, FrameDims};

/// Floor on the normalizing percentile.
pub const NORM_EPS: f64 = 1e-8;

const FLOAT_MAGIC: &[u8; 8] = b"FTHEAT01";

/// Row-major single-channel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub dims: FrameDims,
    pub data: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(dims: FrameDims) -> Self {
        Self { dims, data: vec![0.0; dims.pixels()] }
    }

    pub fn filled(dims: FrameDims, value: f64) -> Self {
        Self { dims, data: vec![value; dims.pixels()] }
    }

    pub fn from_vec(dims: FrameDims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.pixels() {
            return Err(Error::InvalidArgument(format!(
                "heatmap data has {} values, expected {}",
                data.len(),
                dims.pixels()
            )));
        }
        Ok(Self { dims, data })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.dims.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.dims.width + x] = v;
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `(x, y)` of the largest value; first in row-major order on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best % self.dims.width, best / self.dims.width)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { dims: self.dims, data: self.data.iter().map(|v| v * factor).collect() }
    }

    /// 8-bit grayscale PNG, each pixel `round(255 * clamp(v, 0, 1))`.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::GrayImage::from_raw(self.dims.width as u32, self.dims.height as u32, bytes)
            .expect("buffer size matches dims");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.into_luma8();
        let dims = FrameDims::new(img.width() as usize, img.height() as usize);
        let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Ok(Self { dims, data })
    }

    /// Lossless little-endian f32 grid behind a 16-byte header:
    /// 8-byte magic, u32 width, u32 height.
    pub fn write_float<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(FLOAT_MAGIC)?;
        w.write_all(&(self.dims.width as u32).to_le_bytes())?;
        w.write_all(&(self.dims.height as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_float<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[..8] != FLOAT_MAGIC {
            return Err(Error::InvalidArgument("not a float heatmap file".into()));
        }
        let width = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let dims = FrameDims::new(width, height);
        let mut raw = vec![0u8; dims.pixels() * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self { dims, data })
    }

    pub fn save_float(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_float(f)
    }

    pub fn load_float(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_float(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AreaComp {
    None,
    Sqrt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapConfig {
    /// Decay rate of the accumulated density, in (0, 1).
    pub alpha: f64,
    /// Kernel sigma as a fraction of box extent.
    pub scale: f64,
    /// Odd smoothing kernel size.
    pub smooth_k: usize,
    /// Normalizing percentile in (0, 100].
    pub percentile: f64,
    pub out_w: usize,
    pub out_h: usize,
    pub area_comp: AreaComp,
    /// Relative growth of w and h before the kernel is built.
    pub inflation: f64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self {
            alpha: 0.22,
            scale: 0.45,
            smooth_k: 9,
            percentile: 99.5,
            out_w: 960,
            out_h: 540,
            area_comp: AreaComp::Sqrt,
            inflation: 0.0,
        }
    }
}

impl HeatmapConfig {
    pub fn dims(&self) -> FrameDims {
        FrameDims::new(self.out_w, self.out_h)
    }

    pub fn with_dims(mut self, dims: FrameDims) -> Self {
        self.out_w = dims.width;
        self.out_h = dims.height;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("heatmap: {m}")));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(self.scale > 0.0) {
            return bad("scale must be positive");
        }
        if self.smooth_k == 0 || self.smooth_k % 2 == 0 {
            return bad("smooth_k must be odd and positive");
        }
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return bad("percentile must lie in (0, 100]");
        }
        if self.out_w == 0 || self.out_h == 0 {
            return bad("output resolution must be positive");
        }
        if !(self.inflation >= 0.0) {
            return bad("inflation must be non-negative");
        }
        Ok(())
    }
}

/// Peak-normalized Gaussian for one box, zero outside ±3σ.
pub fn box_kernel(b: &BBox, cfg: &HeatmapConfig) -> Heatmap {
    let mut out = Heatmap::zeros(cfg.dims());
    add_kernel(&mut out, b, cfg, 1.0);
    out
}

fn add_kernel(out: &mut Heatmap, b: &BBox, cfg: &HeatmapConfig, weight: f64) {
    let w = b.w * (1.0 + cfg.inflation);
    let h = b.h * (1.0 + cfg.inflation);
    let sx = (cfg.scale * w).max(1.0);
    let sy = (cfg.scale * h).max(1.0);
    let Some((x0, x1)) = window(b.cx, sx, out.dims.width) else { return };
    let Some((y0, y1)) = window(b.cy, sy, out.dims.height) else { return };

    let gx: Vec<f64> = (x0..=x1)
        .map(|x| {
            let d = (x as f64 - b.cx) / sx;
            (-0.5 * d * d).exp()
        })
        .collect();
    for y in y0..=y1 {
        let d = (y as f64 - b.cy) / sy;
        let gy = weight * (-0.5 * d * d).exp();
        let row = &mut out.data[y * out.dims.width..(y + 1) * out.dims.width];
        for (x, g) in (x0..=x1).zip(&gx) {
            row[x] += gy * g;
        }
    }
}

/// Inclusive pixel range within ±3σ of `c`, clipped to `[0, n)`.
fn window(c: f64, sigma: f64, n: usize) -> Option<(usize, usize)> {
    let lo = (c - 3.0 * sigma).ceil().max(0.0);
    let hi = (c + 3.0 * sigma).floor().min(n as f64 - 1.0);
    if !(lo <= hi) {
        return None;
    }
    Some((lo as usize, hi as usize))
}

pub fn area_weight(b: &BBox, mode: AreaComp) -> f64 {
    match mode {
        AreaComp::None => 1.0,
        AreaComp::Sqrt => 1.0 / (b.w * b.h).max(1.0).sqrt(),
    }
}

/// Sum of area-weighted kernels for one frame.
pub fn frame_density(boxes: &[BBox], cfg: &HeatmapConfig) -> Heatmap {
    let mut out = Heatmap::zeros(cfg.dims());
    for b in boxes {
        add_kernel(&mut out, b, cfg, area_weight(b, cfg.area_comp));
    }
    out
}

/// `(1 - alpha) * prev + current`, elementwise.
pub fn accumulate(prev: &Heatmap, current_density: &Heatmap, alpha: f64) -> Heatmap {
    assert_eq!(prev.dims, current_density.dims, "accumulate: dims differ");
    let keep = 1.0 - alpha;
    Heatmap {
        dims: prev.dims,
        data: prev
            .data
            .iter()
            .zip(&current_density.data)
            .map(|(p, c)| keep * p + c)
            .collect(),
    }
}

/// Standard deviation tied to a smoothing kernel size.
pub fn smoothing_sigma(k: usize) -> f64 {
    0.3 * ((k as f64 - 1.0) * 0.5 - 1.0) + 0.8
}

fn gaussian_taps(k: usize) -> Vec<f64> {
    if k <= 1 {
        return vec![1.0];
    }
    let sigma = smoothing_sigma(k);
    let r = (k / 2) as f64;
    let taps: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - r;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable Gaussian blur with replicated borders.
pub fn smooth(m: &Heatmap, k: usize) -> Heatmap {
    let taps = gaussian_taps(k);
    if taps.len() == 1 {
        return m.clone();
    }
    let r = (taps.len() / 2) as isize;
    let (w, h) = (m.dims.width, m.dims.height);
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0.0; m.data.len()];
    for y in 0..h {
        let row = &m.data[y * w..(y + 1) * w];
        let dst = &mut tmp[y * w..(y + 1) * w];
        for (x, d) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, t) in taps.iter().enumerate() {
                acc += t * row[clampi(x as isize + j as isize - r, w)];
            }
            *d = acc;
        }
    }
    let mut out = vec![0.0; m.data.len()];
    for y in 0..h {
        let dst = &mut out[y * w..(y + 1) * w];
        for (j, t) in taps.iter().enumerate() {
            let src = clampi(y as isize + j as isize - r, h);
            let srow = &tmp[src * w..(src + 1) * w];
            for (d, s) in dst.iter_mut().zip(srow) {
                *d += t * s;
            }
        }
    }
    Heatmap { dims: m.dims, data: out }
}

/// Percentile `p` in `[0, 100]` by linear interpolation between order
/// statistics at fractional rank `p/100 * (n-1)`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty slice");
    let n = values.len();
    let rank = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let mut buf = values.to_vec();
    let (_, lo_v, upper) = buf.select_nth_unstable_by(lo, f64::total_cmp);
    let lo_v = *lo_v;
    if hi == lo {
        return lo_v;
    }
    let hi_v = upper.iter().copied().fold(f64::INFINITY, f64::min);
    lo_v + (rank - lo as f64) * (hi_v - lo_v)
}

/// `clip(m / max(Q_p(m), eps), 0, 1)`.
pub fn robust_normalize(m: &Heatmap, p: f64) -> Heatmap {
    let q = percentile(&m.data, p).max(NORM_EPS);
    Heatmap {
        dims: m.dims,
        data: m.data.iter().map(|v| (v / q).clamp(0.0, 1.0)).collect(),
    }
}

/// Maps a box from pixel coordinates at `from` to pixel coordinates at `to`.
pub fn rescale_box(b: &BBox, from: FrameDims, to: FrameDims) -> BBox {
    if from == to {
        return *b;
    }
    let sx = to.width as f64 / from.width as f64;
    let sy = to.height as f64 / from.height as f64;
    BBox::new(b.cx * sx, b.cy * sy, b.w * sx, b.h * sy)
}

/// Per-frame box lists at a known pixel resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSequence {
    pub dims: FrameDims,
    pub frames: Vec<Vec<BBox>>,
}

/// Decay state carried between frames: the raw accumulation before
/// smoothing and normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapState {
    pub accum: Heatmap,
}

impl HeatmapState {
    pub fn new(dims: FrameDims) -> Self {
        Self { accum: Heatmap::zeros(dims) }
    }

    /// Folds one frame's boxes into the state and returns the normalized map.
    pub fn push(&mut self, boxes: &[BBox], cfg: &HeatmapConfig) -> Heatmap {
        let density = frame_density(boxes, cfg);
        self.accum = accumulate(&self.accum, &density, cfg.alpha);
        robust_normalize(&smooth(&self.accum, cfg.smooth_k), cfg.percentile)
    }
}

pub fn generate_sequence(labels: &BoxSequence, cfg: &HeatmapConfig) -> Result<Vec<Heatmap>> {
    if labels.dims != cfg.dims() {
        return Err(Error::ResolutionMismatch {
            got_w: labels.dims.width,
            got_h: labels.dims.height,
            want_w: cfg.out_w,
            want_h: cfg.out_h,
        });
    }
    let mut state = HeatmapState::new(cfg.dims());
    Ok(labels.frames.iter().map(|boxes| state.push(boxes, cfg)).collect())
}

/// Online rendering of one refined box; same pipeline as
/// [`generate_sequence`].
pub fn render_inference(
    b_refined: &BBox,
    state: &HeatmapState,
    cfg: &HeatmapConfig,
) -> (Heatmap, HeatmapState) {
    let mut next = state.clone();
    let h = next.push(std::slice::from_ref(b_refined), cfg);
    (h, next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_cfg() -> HeatmapConfig {
        HeatmapConfig { out_w: 96, out_h: 64, ..HeatmapConfig::default() }
    }

    #[test]
    fn kernel_values() {
        let cfg = HeatmapConfig::default();
        let b = BBox::new(480.0, 270.0, 100.0, 100.0);
        let k = box_kernel(&b, &cfg);
        assert_eq!(k.get(480, 270), 1.0);
        assert!((k.get(525, 270) - (-0.5f64).exp()).abs() < 1e-12);
        // beyond 3σ = 135 px
        assert_eq!(k.get(480 + 136, 270), 0.0);
        assert_eq!(k.get(480 + 180, 270), 0.0);
        assert!(k.get(480 + 135, 270) > 0.0);
    }

    #[test]
    fn kernel_sigma_floor() {
        let cfg = HeatmapConfig::default();
        let k = box_kernel(&BBox::new(10.0, 10.0, 1.0, 1.0), &cfg);
        // σ = max(1, 0.45) = 1
        assert!((k.get(11, 10) - (-0.5f64).exp()).abs() < 1e-12);
        assert_eq!(k.get(14, 10), 0.0);
    }

    #[test]
    fn inflation_widens_kernel() {
        let cfg = HeatmapConfig { inflation: 1.0, ..HeatmapConfig::default() };
        let k = box_kernel(&BBox::new(480.0, 270.0, 50.0, 50.0), &cfg);
        assert!((k.get(525, 270) - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn density_examples() {
        let cfg = small_cfg();
        assert!(frame_density(&[], &cfg).data.iter().all(|&v| v == 0.0));

        let b = BBox::new(40.0, 30.0, 20.0, 10.0);
        let none = HeatmapConfig { area_comp: AreaComp::None, ..cfg.clone() };
        assert_eq!(frame_density(&[b], &none), box_kernel(&b, &none));

        let two = frame_density(&[b, b], &cfg);
        let k = box_kernel(&b, &cfg);
        let a = 2.0 / (20.0f64 * 10.0).sqrt();
        for (v, kv) in two.data.iter().zip(&k.data) {
            assert!((v - a * kv).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulate_examples() {
        let dims = FrameDims::new(5, 4);
        let cur = Heatmap::from_vec(dims, (0..20).map(|i| i as f64).collect()).unwrap();
        assert_eq!(accumulate(&Heatmap::zeros(dims), &cur, 0.22), cur);
        let decayed = accumulate(&cur, &Heatmap::zeros(dims), 0.22);
        for (d, c) in decayed.data.iter().zip(&cur.data) {
            assert_eq!(*d, 0.78 * c);
        }
    }

    #[test]
    fn smooth_examples() {
        let dims = FrameDims::new(21, 21);
        let mut m = Heatmap::zeros(dims);
        m.set(10, 10, 1.0);
        assert_eq!(smooth(&m, 1), m);

        let s = smooth(&m, 9);
        for y in 0..21 {
            for x in 0..21 {
                assert!((s.get(x, y) - s.get(20 - x, y)).abs() < 1e-15);
                assert!((s.get(x, y) - s.get(x, 20 - y)).abs() < 1e-15);
                assert!((s.get(x, y) - s.get(y, x)).abs() < 1e-15);
            }
        }
        assert!((s.sum() - 1.0).abs() < 1e-12);

        let c = smooth(&Heatmap::filled(dims, 0.37), 9);
        assert!(c.data.iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn smoothing_sigma_for_default_k() {
        assert!((smoothing_sigma(9) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn percentile_matches_sorted_interpolation() {
        let v: Vec<f64> = (0..=1000).rev().map(|i| i as f64).collect();
        assert!((percentile(&v, 99.5) - 995.0).abs() < 1e-12);
        assert!((percentile(&v, 50.0) - 500.0).abs() < 1e-12);
        let v = [3.0, 1.0, 2.0, 4.0];
        // rank 0.95 * 3 = 2.85 -> 3 + 0.85 * (4 - 3)
        assert!((percentile(&v, 95.0) - 3.85).abs() < 1e-12);
        assert_eq!(percentile(&v, 100.0), 4.0);
    }

    #[test]
    fn normalize_examples() {
        let dims = FrameDims::new(7, 3);
        let z = robust_normalize(&Heatmap::zeros(dims), 99.5);
        assert!(z.data.iter().all(|&v| v == 0.0));

        let dims = FrameDims::new(1001, 1);
        let m = Heatmap::from_vec(dims, (0..=1000).map(|i| i as f64).collect()).unwrap();
        let n = robust_normalize(&m, 99.5);
        for (i, v) in n.data.iter().enumerate() {
            if i >= 995 {
                assert_eq!(*v, 1.0);
            } else {
                assert!((v - i as f64 / 995.0).abs() < 1e-12);
            }
        }

        let cfg = small_cfg();
        let k = box_kernel(&BBox::new(48.0, 32.0, 6.0, 6.0), &cfg);
        let n = robust_normalize(&k, 99.5);
        assert_eq!(n.get(48, 32), 1.0);
    }

    #[test]
    fn one_frame_sequence_peaks_at_box() {
        let cfg = small_cfg();
        let b = BBox::new(40.0, 25.0, 16.0, 12.0);
        let seq = BoxSequence { dims: cfg.dims(), frames: vec![vec![b]] };
        let out = generate_sequence(&seq, &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].get(40, 25), 1.0);
        let s = smooth(&frame_density(&[b], &cfg), cfg.smooth_k);
        let (x, y) = s.argmax();
        assert!((x as f64 - 40.0).abs() <= 1.0 && (y as f64 - 25.0).abs() <= 1.0);
    }

    #[test]
    fn resolution_mismatch_is_reported() {
        let cfg = small_cfg();
        let seq = BoxSequence { dims: FrameDims::new(10, 10), frames: vec![] };
        assert!(matches!(
            generate_sequence(&seq, &cfg),
            Err(Error::ResolutionMismatch { .. })
        ));
    }

    #[test]
    fn gap_frames_decay() {
        let cfg = small_cfg();
        let b = BBox::new(40.0, 25.0, 16.0, 12.0);
        let mut state = HeatmapState::new(cfg.dims());
        state.push(&[b], &cfg);
        let mut prev = state.accum.max();
        for _ in 0..5 {
            state.push(&[], &cfg);
            let cur = state.accum.max();
            assert!(cur < prev);
            assert_eq!(cur, 0.78 * prev);
            prev = cur;
        }
    }

    #[test]
    fn render_inference_matches_batch() {
        let cfg = small_cfg();
        let b = BBox::new(30.0, 20.0, 10.0, 14.0);
        let (h, state) = render_inference(&b, &HeatmapState::new(cfg.dims()), &cfg);
        let seq = BoxSequence { dims: cfg.dims(), frames: vec![vec![b]] };
        assert_eq!(h, generate_sequence(&seq, &cfg).unwrap()[0]);

        let first_peak = state.accum.max();
        let (_, state2) = render_inference(&b, &state, &cfg);
        assert!(state2.accum.max() >= first_peak);

        let far = BBox::new(80.0, 50.0, 10.0, 14.0);
        let (_, state3) = render_inference(&far, &state, &cfg);
        assert_eq!(state3.accum.get(30, 20), 0.78 * state.accum.get(30, 20));
        assert!(state3.accum.get(80, 50) > 0.0);
    }

    #[test]
    fn float_format_round_trips() {
        let dims = FrameDims::new(3, 2);
        let h = Heatmap::from_vec(dims, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]).unwrap();
        let mut buf = Vec::new();
        h.write_float(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 6 * 4);
        assert_eq!(&buf[..8], b"FTHEAT01");
        assert_eq!(Heatmap::read_float(&buf[..]).unwrap(), h);
        assert!(Heatmap::read_float(&b"nonsense-header-"[..]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn outputs_stay_in_unit_range(
            frames in proptest::collection::vec(
                proptest::collection::vec((0.0..96.0f64, 0.0..64.0f64, 0.5..60.0f64, 0.5..60.0f64), 0..3),
                1..6,
            )
        ) {
            let cfg = small_cfg();
            let seq = BoxSequence {
                dims: cfg.dims(),
                frames: frames
                    .into_iter()
                    .map(|f| f.into_iter().map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h)).collect())
                    .collect(),
            };
            for h in generate_sequence(&seq, &cfg).unwrap() {
                prop_assert!(h.data.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
