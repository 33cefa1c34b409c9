//! Deterministic multi-scale features and box-aligned embeddings.
//!
//! The pyramid is a handcrafted stand-in for a frozen detector neck: four
//! channels (box-filtered intensity, |∂x|, |∂y|, local variance) average
//! pooled to strides 8, 16 and 32. Embeddings are the sum over levels of a
//! per-level linear projection of a bilinearly pooled ROI grid.

use rand::Rng;

use crate::geometry::{map_to_level, BBox, FrameDims};
use crate::linalg::Matrix;

pub const LEVEL_STRIDES: [u32; 3] = [8, 16, 32];
pub const FEATURE_CHANNELS: usize = 4;

const GRAD_GAIN: f32 = 4.0;
const VAR_GAIN: f32 = 16.0;

/// Image frame, row-major with interleaved channels, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub dims: FrameDims,
    pub channels: usize,
    pub data: Vec<f32>,
    pub index: usize,
}

impl Frame {
    pub fn gray(dims: FrameDims, data: Vec<f32>, index: usize) -> Self {
        assert_eq!(data.len(), dims.pixels());
        Self { dims, channels: 1, data, index }
    }

    fn luminance(&self) -> Vec<f32> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f32>() / self.channels as f32)
            .collect()
    }

    pub fn save_png(&self, path: impl AsRef<std::path::Path>) -> crate::Result<()> {
        let lum = self.luminance();
        let bytes = lum.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let img = image::GrayImage::from_raw(self.dims.width as u32, self.dims.height as u32, bytes)
            .expect("buffer size matches dims");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<std::path::Path>, index: usize) -> crate::Result<Self> {
        let img = image::open(path)?.into_luma8();
        let dims = FrameDims::new(img.width() as usize, img.height() as usize);
        let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        Ok(Self::gray(dims, data, index))
    }
}

/// `height x width x channels` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: [FeatureGrid; 3],
}

impl FeaturePyramid {
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for l in &mut out.levels {
            l.data.iter_mut().for_each(|v| *v *= factor);
        }
        out
    }
}

fn box3(src: &[f32], w: usize, h: usize) -> Vec<f32> {
    let at = |x: isize, y: isize| {
        let xi = x.clamp(0, w as isize - 1) as usize;
        let yi = y.clamp(0, h as isize - 1) as usize;
        src[yi * w + xi]
    };
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut s = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    s += at(x + dx, y + dy);
                }
            }
            out[y as usize * w + x as usize] = s / 9.0;
        }
    }
    out
}

/// Full-resolution handcrafted channels.
fn dense_channels(frame: &Frame) -> [Vec<f32>; FEATURE_CHANNELS] {
    let (w, h) = (frame.dims.width, frame.dims.height);
    let lum = frame.luminance();
    let at = |x: isize, y: isize| {
        let xi = x.clamp(0, w as isize - 1) as usize;
        let yi = y.clamp(0, h as isize - 1) as usize;
        lum[yi * w + xi]
    };
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = GRAD_GAIN * 0.5 * (at(x + 1, y) - at(x - 1, y)).abs();
            gy[i] = GRAD_GAIN * 0.5 * (at(x, y + 1) - at(x, y - 1)).abs();
        }
    }
    let mean = box3(&lum, w, h);
    let sq: Vec<f32> = lum.iter().map(|v| v * v).collect();
    let mean_sq = box3(&sq, w, h);
    let var = mean
        .iter()
        .zip(&mean_sq)
        .map(|(m, s)| VAR_GAIN * (s - m * m).max(0.0))
        .collect();
    [mean, gx, gy, var]
}

fn pool(channels: &[Vec<f32>; FEATURE_CHANNELS], dims: FrameDims, stride: usize) -> FeatureGrid {
    let (w, h) = (dims.width, dims.height);
    let gw = w.div_ceil(stride);
    let gh = h.div_ceil(stride);
    let mut grid = FeatureGrid::zeros(gw, gh, FEATURE_CHANNELS);
    for gyi in 0..gh {
        let y0 = gyi * stride;
        let y1 = (y0 + stride).min(h);
        for gxi in 0..gw {
            let x0 = gxi * stride;
            let x1 = (x0 + stride).min(w);
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let cell = grid.at_mut(gxi, gyi);
            for (c, ch) in channels.iter().enumerate() {
                let mut s = 0.0f64;
                for y in y0..y1 {
                    s += ch[y * w + x0..y * w + x1].iter().map(|&v| v as f64).sum::<f64>();
                }
                cell[c] = s / n;
            }
        }
    }
    grid
}

pub fn build_pyramid(frame: &Frame) -> FeaturePyramid {
    let dense = dense_channels(frame);
    let levels = LEVEL_STRIDES.map(|s| pool(&dense, frame.dims, s as usize));
    FeaturePyramid { levels }
}

/// Bilinear sample at continuous grid position `(x, y)`; cell `j` has its
/// center at `j + 0.5`. Positions outside the grid clamp to the border.
fn bilinear(grid: &FeatureGrid, x: f64, y: f64, out: &mut [f64]) {
    let u = (x - 0.5).clamp(0.0, (grid.width - 1) as f64);
    let v = (y - 0.5).clamp(0.0, (grid.height - 1) as f64);
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let x1 = (x0 + 1).min(grid.width - 1);
    let y1 = (y0 + 1).min(grid.height - 1);
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    let w00 = (1.0 - fx) * (1.0 - fy);
    let w10 = fx * (1.0 - fy);
    let w01 = (1.0 - fx) * fy;
    let w11 = fx * fy;
    let (a, b, c, d) = (grid.at(x0, y0), grid.at(x1, y0), grid.at(x0, y1), grid.at(x1, y1));
    for (ch, o) in out.iter_mut().enumerate() {
        *o = w00 * a[ch] + w10 * b[ch] + w01 * c[ch] + w11 * d[ch];
    }
}

/// `pool x pool` bilinear samples at bin centers, laid out `(row, col, channel)`.
pub fn roi_align(grid: &FeatureGrid, b: &BBox, pool: usize) -> Vec<f64> {
    let c = grid.channels;
    let mut out = vec![0.0; pool * pool * c];
    let (x0, y0, _, _) = b.corners();
    let bw = b.w / pool as f64;
    let bh = b.h / pool as f64;
    for py in 0..pool {
        let y = y0 + (py as f64 + 0.5) * bh;
        for px in 0..pool {
            let x = x0 + (px as f64 + 0.5) * bw;
            let i = (py * pool + px) * c;
            bilinear(grid, x, y, &mut out[i..i + c]);
        }
    }
    out
}

/// Box-aligned embedding `f(B)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiEmbedding(pub Vec<f64>);

impl RoiEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Per-level projections plus the positional table added to each pooled grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub pool: usize,
    pub d_emb: usize,
    pub levels: [Matrix; 3],
    pub posenc: Vec<f64>,
}

/// Amplitude of the sinusoidal positional table.
const POSENC_GAIN: f64 = 0.1;

/// Sinusoidal 2-D table, `(row, col, channel)` layout.
pub fn sinusoidal_table(pool: usize, channels: usize) -> Vec<f64> {
    let mut t = vec![0.0; pool * pool * channels];
    for py in 0..pool {
        for px in 0..pool {
            for c in 0..channels {
                // channels cycle through sin/cos of x and y at growing frequency
                let freq = (1 + c / 4) as f64 * std::f64::consts::PI / pool as f64;
                let pos = if (c / 2) % 2 == 0 { px } else { py } as f64 + 0.5;
                let v = if c % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
                t[(py * pool + px) * channels + c] = POSENC_GAIN * v;
            }
        }
    }
    t
}

impl ProjectionParams {
    pub fn init(pool: usize, d_emb: usize, rng: &mut impl Rng) -> Self {
        let fan_in = pool * pool * FEATURE_CHANNELS;
        Self {
            pool,
            d_emb,
            levels: std::array::from_fn(|_| Matrix::uniform(d_emb, fan_in, rng)),
            posenc: sinusoidal_table(pool, FEATURE_CHANNELS),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            pool: self.pool,
            d_emb: self.d_emb,
            levels: std::array::from_fn(|i| self.levels[i].zeros_like()),
            posenc: vec![0.0; self.posenc.len()],
        }
    }
}

/// Pooled per-level inputs (with positional table) kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MsrCache {
    pub inputs: [Vec<f64>; 3],
}

pub fn msr_fuse(pyramid: &FeaturePyramid, b: &BBox, params: &ProjectionParams) -> RoiEmbedding {
    msr_fuse_cached(pyramid, b, params).0
}

pub fn msr_fuse_cached(
    pyramid: &FeaturePyramid,
    b: &BBox,
    params: &ProjectionParams,
) -> (RoiEmbedding, MsrCache) {
    let mut emb = vec![0.0; params.d_emb];
    let inputs: [Vec<f64>; 3] = std::array::from_fn(|s| {
        let lb = map_to_level(b, LEVEL_STRIDES[s]);
        let mut x = roi_align(&pyramid.levels[s], &lb, params.pool);
        for (v, p) in x.iter_mut().zip(&params.posenc) {
            *v += p;
        }
        for (e, y) in emb.iter_mut().zip(params.levels[s].matvec(&x)) {
            *e += y;
        }
        x
    });
    (RoiEmbedding(emb), MsrCache { inputs })
}

/// Accumulates projection gradients for upstream gradient `d_emb` on `f(B)`.
pub fn msr_backward(cache: &MsrCache, d_emb: &[f64], grads: &mut ProjectionParams) {
    for (g, x) in grads.levels.iter_mut().zip(&cache.inputs) {
        g.add_outer(d_emb, x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_from(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> FeatureGrid {
        let mut g = FeatureGrid::zeros(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    g.at_mut(x, y)[c] = f(x, y, c);
                }
            }
        }
        g
    }

    fn random_pyramid(rng: &mut impl Rng, dims: FrameDims) -> FeaturePyramid {
        let levels = LEVEL_STRIDES.map(|s| {
            let s = s as usize;
            grid_from(dims.width.div_ceil(s), dims.height.div_ceil(s), FEATURE_CHANNELS, |_, _, _| {
                rng.random::<f64>()
            })
        });
        FeaturePyramid { levels }
    }

    #[test]
    fn constant_frame_has_no_gradient() {
        let dims = FrameDims::new(64, 48);
        let pyr = build_pyramid(&Frame::gray(dims, vec![0.6; dims.pixels()], 0));
        for level in &pyr.levels {
            for y in 0..level.height {
                for x in 0..level.width {
                    let v = level.at(x, y);
                    assert!((v[0] - 0.6).abs() < 1e-6);
                    assert_eq!(v[1], 0.0);
                    assert_eq!(v[2], 0.0);
                    assert!(v[3].abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn step_edge_peaks_at_edge_column() {
        let dims = FrameDims::new(128, 64);
        let edge = 76; // both gradient columns (75, 76) share one cell per level
        let data = (0..dims.pixels())
            .map(|i| if i % dims.width >= edge { 1.0 } else { 0.0 })
            .collect();
        let pyr = build_pyramid(&Frame::gray(dims, data, 0));
        for (level, stride) in pyr.levels.iter().zip(LEVEL_STRIDES) {
            let expected = edge / stride as usize;
            for y in 0..level.height {
                let col = (0..level.width)
                    .max_by(|&a, &b| level.at(a, y)[1].total_cmp(&level.at(b, y)[1]))
                    .unwrap();
                assert_eq!(col, expected, "stride {stride}");
                assert_eq!(level.at(col, y)[2], 0.0);
            }
        }
    }

    #[test]
    fn pyramid_shapes_use_ceiling_division() {
        let dims = FrameDims::new(960, 540);
        let pyr = build_pyramid(&Frame::gray(dims, vec![0.0; dims.pixels()], 0));
        let shapes: Vec<_> = pyr.levels.iter().map(|l| (l.width, l.height)).collect();
        assert_eq!(shapes, vec![(120, 68), (60, 34), (30, 17)]);
    }

    #[test]
    fn roi_align_examples() {
        let g = grid_from(4, 3, 2, |x, y, c| (x * 10 + y * 100 + c) as f64);
        // exactly one cell
        let v = roi_align(&g, &BBox::new(2.5, 1.5, 1.0, 1.0), 1);
        assert_eq!(v, g.at(2, 1).to_vec());
        // halfway between two horizontal neighbours
        let v = roi_align(&g, &BBox::new(2.0, 1.5, 1.0, 1.0), 1);
        for c in 0..2 {
            assert!((v[c] - 0.5 * (g.at(1, 1)[c] + g.at(2, 1)[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn full_grid_roi_recovers_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = grid_from(5, 5, 3, |_, _, _| rng.random::<f64>());
        let v = roi_align(&g, &BBox::new(2.5, 2.5, 5.0, 5.0), 5);
        for (a, b) in v.iter().zip(&g.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn roi_align_translation_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = grid_from(12, 10, 2, |_, _, _| rng.random::<f64>());
        let shifted = grid_from(12, 10, 2, |x, y, c| if x >= 2 && y >= 1 { g.at(x - 2, y - 1)[c] } else { 0.0 });
        for _ in 0..50 {
            let b = BBox::new(
                rng.random_range(3.0..7.0),
                rng.random_range(3.0..6.0),
                rng.random_range(1.0..3.0),
                rng.random_range(1.0..3.0),
            );
            let moved = BBox::new(b.cx + 2.0, b.cy + 1.0, b.w, b.h);
            let a = roi_align(&g, &b, 3);
            let c = roi_align(&shifted, &moved, 3);
            for (x, y) in a.iter().zip(&c) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_bounds_samples_clamp() {
        let g = grid_from(3, 3, 1, |x, y, _| (x + 3 * y) as f64);
        let v = roi_align(&g, &BBox::new(-10.0, -10.0, 2.0, 2.0), 1);
        assert_eq!(v, vec![0.0]);
    }

    #[test]
    fn msr_zero_inputs_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = FrameDims::new(64, 64);
        let mut params = ProjectionParams::init(7, 16, &mut rng);
        params.posenc.iter_mut().for_each(|v| *v = 0.0);
        let pyr = random_pyramid(&mut rng, dims).scaled(0.0);
        let e = msr_fuse(&pyr, &BBox::new(20.0, 30.0, 16.0, 10.0), &params);
        assert!(e.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn msr_is_linear_without_posenc() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = FrameDims::new(96, 64);
        let mut params = ProjectionParams::init(7, 16, &mut rng);
        params.posenc.iter_mut().for_each(|v| *v = 0.0);
        let pyr = random_pyramid(&mut rng, dims);
        let b = BBox::new(40.0, 30.0, 24.0, 18.0);
        let base = msr_fuse(&pyr, &b, &params);
        for lambda in [2.0, -0.5, 3.25] {
            let e = msr_fuse(&pyr.scaled(lambda), &b, &params);
            for (x, y) in e.0.iter().zip(&base.0) {
                assert!((x - lambda * y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn msr_distinguishes_disjoint_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = FrameDims::new(128, 96);
        let params = ProjectionParams::init(7, 32, &mut rng);
        for _ in 0..20 {
            let pyr = random_pyramid(&mut rng, dims);
            let a = msr_fuse(&pyr, &BBox::new(30.0, 30.0, 32.0, 32.0), &params);
            let b = msr_fuse(&pyr, &BBox::new(95.0, 65.0, 32.0, 32.0), &params);
            assert_ne!(a, b);
        }
    }

    #[test]
    fn pyramid_is_deterministic() {
        let dims = FrameDims::new(40, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f32> = (0..dims.pixels()).map(|_| rng.random::<f32>()).collect();
        let f = Frame::gray(dims, data, 3);
        assert_eq!(build_pyramid(&f), build_pyramid(&f));
    }
}
