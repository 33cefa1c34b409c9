//! Dense saliency metrics: MAE, MSE, CC, SIM and NSS.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{percentile, Heatmap};

pub const METRIC_EPS: f64 = 1e-8;

/// Quantile of the ground-truth map that defines the NSS salient mask.
pub const NSS_QUANTILE: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub nss: f64,
    pub cc: f64,
    pub sim: f64,
    pub mse: f64,
    pub mae: f64,
    pub n_frames: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "sequence_id,nss,cc,sim,mse,mae,n_frames";

    pub fn write_csv_row<W: Write>(&self, mut w: W, sequence_id: &str) -> std::io::Result<()> {
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            sequence_id, self.nss, self.cc, self.sim, self.mse, self.mae, self.n_frames
        )
    }

    /// Frame-weighted mean of several reports.
    pub fn pooled(reports: &[MetricReport]) -> MetricReport {
        let n: usize = reports.iter().map(|r| r.n_frames).sum();
        if n == 0 {
            return MetricReport { nss: 0.0, cc: 0.0, sim: 0.0, mse: 0.0, mae: 0.0, n_frames: 0 };
        }
        let wsum = |f: fn(&MetricReport) -> f64| {
            reports.iter().map(|r| f(r) * r.n_frames as f64).sum::<f64>() / n as f64
        };
        MetricReport {
            nss: wsum(|r| r.nss),
            cc: wsum(|r| r.cc),
            sim: wsum(|r| r.sim),
            mse: wsum(|r| r.mse),
            mae: wsum(|r| r.mae),
            n_frames: n,
        }
    }
}

fn check_dims(p: &Heatmap, g: &Heatmap) {
    assert_eq!(p.dims, g.dims, "metric inputs must share dimensions");
}

pub fn mae(p: &Heatmap, g: &Heatmap) -> f64 {
    check_dims(p, g);
    let s: f64 = p.data.iter().zip(&g.data).map(|(a, b)| (a - b).abs()).sum();
    s / p.data.len() as f64
}

pub fn mse(p: &Heatmap, g: &Heatmap) -> f64 {
    check_dims(p, g);
    let s: f64 = p.data.iter().zip(&g.data).map(|(a, b)| (a - b) * (a - b)).sum();
    s / p.data.len() as f64
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pearson correlation with `eps` added to the denominator.
pub fn cc(p: &Heatmap, g: &Heatmap) -> f64 {
    check_dims(p, g);
    let mp = mean(&p.data);
    let mg = mean(&g.data);
    let (mut num, mut vp, mut vg) = (0.0, 0.0, 0.0);
    for (a, b) in p.data.iter().zip(&g.data) {
        let da = a - mp;
        let db = b - mg;
        num += da * db;
        vp += da * da;
        vg += db * db;
    }
    num / (vp.sqrt() * vg.sqrt() + METRIC_EPS)
}

/// Non-negative part normalized to unit sum; uniform if the sum is zero.
fn l1_normalized(m: &Heatmap) -> Vec<f64> {
    let total: f64 = m.data.iter().map(|v| v.max(0.0)).sum();
    if total == 0.0 {
        return vec![1.0 / m.data.len() as f64; m.data.len()];
    }
    let denom = total + METRIC_EPS;
    m.data.iter().map(|v| v.max(0.0) / denom).collect()
}

/// Histogram intersection of the two unit-mass maps.
pub fn sim(p: &Heatmap, g: &Heatmap) -> f64 {
    check_dims(p, g);
    let ph = l1_normalized(p);
    let gh = l1_normalized(g);
    ph.iter().zip(&gh).map(|(a, b)| a.min(*b)).sum()
}

/// Mean z-scored prediction over the top 5% of ground-truth pixels.
pub fn nss(p: &Heatmap, g: &Heatmap) -> f64 {
    check_dims(p, g);
    if p.data.iter().all(|&v| v == p.data[0]) {
        // every z-score of a constant map is exactly zero
        return 0.0;
    }
    let n = p.data.len() as f64;
    let mp = mean(&p.data);
    let sd = (p.data.iter().map(|v| (v - mp) * (v - mp)).sum::<f64>() / n).sqrt();
    let thresh = percentile(&g.data, NSS_QUANTILE * 100.0);
    let (mut acc, mut count) = (0.0, 0usize);
    for (pv, gv) in p.data.iter().zip(&g.data) {
        if *gv >= thresh {
            acc += (pv - mp) / (sd + METRIC_EPS);
            count += 1;
        }
    }
    acc / count.max(1) as f64
}

/// All five metrics on one frame.
pub fn frame_metrics(p: &Heatmap, g: &Heatmap) -> MetricReport {
    MetricReport {
        nss: nss(p, g),
        cc: cc(p, g),
        sim: sim(p, g),
        mse: mse(p, g),
        mae: mae(p, g),
        n_frames: 1,
    }
}

/// Per-frame metrics averaged over frames.
pub fn evaluate_sequence(preds: &[Heatmap], gts: &[Heatmap]) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(Error::SequenceMismatch(format!(
            "{} predicted frames vs {} ground-truth frames",
            preds.len(),
            gts.len()
        )));
    }
    if let Some(i) = preds.iter().zip(gts).position(|(p, g)| p.dims != g.dims) {
        return Err(Error::SequenceMismatch(format!(
            "frame {i}: {}x{} prediction vs {}x{} ground truth",
            preds[i].dims.width, preds[i].dims.height, gts[i].dims.width, gts[i].dims.height
        )));
    }
    let per_frame: Vec<MetricReport> =
        preds.par_iter().zip(gts.par_iter()).map(|(p, g)| frame_metrics(p, g)).collect();
    Ok(MetricReport::pooled(&per_frame))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::FrameDims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut impl Rng, dims: FrameDims) -> Heatmap {
        Heatmap::from_vec(dims, (0..dims.pixels()).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn pixel_errors() {
        let dims = FrameDims::new(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_map(&mut rng, dims);
        assert_eq!(mae(&p, &p), 0.0);
        assert_eq!(mse(&p, &p), 0.0);
        let ones = Heatmap::filled(dims, 1.0);
        let zeros = Heatmap::zeros(dims);
        assert_eq!(mae(&ones, &zeros), 1.0);
        assert_eq!(mse(&Heatmap::filled(dims, 0.5), &zeros), 0.25);
    }

    #[test]
    fn cc_examples() {
        let dims = FrameDims::new(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_map(&mut rng, dims);
        assert!((cc(&g, &g) - 1.0).abs() < 1e-6);
        let neg = Heatmap::from_vec(dims, g.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!((cc(&neg, &g) + 1.0).abs() < 1e-6);
        assert!(cc(&Heatmap::filled(dims, 0.3), &g).abs() < 1e-3);
    }

    #[test]
    fn cc_affine_invariance() {
        let dims = FrameDims::new(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_map(&mut rng, dims);
        let g = random_map(&mut rng, dims);
        let q = Heatmap::from_vec(dims, p.data.iter().map(|v| 3.5 * v + 0.2).collect()).unwrap();
        assert!((cc(&p, &g) - cc(&q, &g)).abs() < 1e-6);
        assert_eq!(cc(&p, &g), cc(&g, &p));
    }

    #[test]
    fn sim_examples() {
        let dims = FrameDims::new(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_map(&mut rng, dims);
        assert!((sim(&g, &g) - 1.0).abs() < 1e-7);

        let mut a = Heatmap::zeros(dims);
        let mut b = Heatmap::zeros(dims);
        a.set(0, 0, 1.0);
        b.set(3, 3, 1.0);
        assert_eq!(sim(&a, &b), 0.0);

        // zero prediction falls back to uniform
        let total: f64 = g.data.iter().sum::<f64>() + METRIC_EPS;
        let oracle: f64 = g.data.iter().map(|v| (v / total).min(1.0 / 16.0)).sum();
        assert!((sim(&Heatmap::zeros(dims), &g) - oracle).abs() < 1e-12);

        let scaled = g.scaled(7.0);
        let p = random_map(&mut rng, dims);
        assert!((sim(&p, &g) - sim(&p, &scaled)).abs() < 1e-7);
        assert_eq!(sim(&p, &g), sim(&g, &p));
    }

    #[test]
    fn nss_examples() {
        let dims = FrameDims::new(10, 10);
        assert_eq!(nss(&Heatmap::filled(dims, 0.4), &Heatmap::filled(dims, 0.2)), 0.0);

        // One hot prediction pixel. Ground truth ramps so its top-5%
        // mask is exactly the five largest pixels, including the hot one.
        let mut p = Heatmap::zeros(dims);
        p.set(3, 7, 1.0);
        let mut g = Heatmap::zeros(dims);
        for (i, v) in g.data.iter_mut().enumerate() {
            *v = i as f64 / 1000.0;
        }
        g.set(3, 7, 1.0);
        let mu = 0.01;
        let sd = (0.01f64 * 0.99).sqrt();
        let hot = (1.0 - mu) / (sd + METRIC_EPS);
        let cold = (0.0 - mu) / (sd + METRIC_EPS);
        let expected = (hot + 4.0 * cold) / 5.0;
        assert!((nss(&p, &g) - expected).abs() < 1e-12);
    }

    #[test]
    fn nss_is_not_symmetric() {
        let dims = FrameDims::new(10, 10);
        let mut p = Heatmap::zeros(dims);
        p.set(0, 0, 1.0);
        let g = Heatmap::from_vec(dims, (0..100).map(|i| i as f64).collect()).unwrap();
        assert!((nss(&p, &g) - nss(&g, &p)).abs() > 1e-3);
    }

    #[test]
    fn sequence_evaluation() {
        let dims = FrameDims::new(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_map(&mut rng, dims);
        let b = random_map(&mut rng, dims);
        let c = random_map(&mut rng, dims);
        let d = random_map(&mut rng, dims);

        let same = evaluate_sequence(&[a.clone()], &[a.clone()]).unwrap();
        assert!(same.nss > 0.0);
        assert!((same.cc - 1.0).abs() < 1e-6 && (same.sim - 1.0).abs() < 1e-6);
        assert_eq!((same.mse, same.mae, same.n_frames), (0.0, 0.0, 1));

        let one = evaluate_sequence(&[a.clone()], &[b.clone()]).unwrap();
        assert_eq!(one, frame_metrics(&a, &b));

        let two = evaluate_sequence(&[a.clone(), c.clone()], &[b.clone(), d.clone()]).unwrap();
        let (x, y) = (frame_metrics(&a, &b), frame_metrics(&c, &d));
        assert!((two.cc - (x.cc + y.cc) / 2.0).abs() < 1e-12);
        assert!((two.nss - (x.nss + y.nss) / 2.0).abs() < 1e-12);
        assert!((two.mae - (x.mae + y.mae) / 2.0).abs() < 1e-12);
        assert_eq!(two.n_frames, 2);

        assert!(matches!(
            evaluate_sequence(&[a.clone()], &[]),
            Err(Error::SequenceMismatch(_))
        ));
        let other = Heatmap::zeros(FrameDims::new(4, 4));
        assert!(matches!(evaluate_sequence(&[a], &[other]), Err(Error::SequenceMismatch(_))));
    }
}
