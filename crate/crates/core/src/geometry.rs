//! Box algebra in center-size form.
//!
//! Every box in the crate is `(cx, cy, w, h)` in pixels. Corner form only
//! appears at file boundaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::ProposalSet;

/// Axis-aligned box, center-size parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new((x0 + x1) * 0.5, (y0 + y1) * 0.5, x1 - x0, y1 - y0)
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        let hw = self.w * 0.5;
        let hh = self.h * 0.5;
        (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }

    pub fn is_valid(&self) -> bool {
        self.cx.is_finite()
            && self.cy.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.cx, self.cy)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Keeps the extent at least one pixel and the center inside the frame.
    pub fn clamp_to_frame(&self, dims: FrameDims) -> Self {
        Self {
            cx: self.cx.clamp(0.0, dims.width as f64),
            cy: self.cy.clamp(0.0, dims.height as f64),
            w: self.w.max(1.0),
            h: self.h.max(1.0),
        }
    }
}

/// Frame size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameDims {
    pub width: usize,
    pub height: usize,
}

impl FrameDims {
    pub const fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

/// Polar correction `(theta, d, s_w, s_h)` applied by [`polar_update`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarCorrection {
    pub theta: f64,
    pub d: f64,
    pub s_w: f64,
    pub s_h: f64,
}

impl PolarCorrection {
    pub const IDENTITY: Self = Self {
        theta: 0.0,
        d: 0.0,
        s_w: 1.0,
        s_h: 1.0,
    };
}

/// Motion descriptor between a current box and a reference box.
///
/// Layout: current `(cx/W, cy/H, w/W, h/H)`, reference in the same form,
/// center displacement `((cx-cx_r)/W, (cy-cy_r)/H)`, then
/// `(ln(w/w_r), ln(h/h_r))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoDescriptor(pub [f64; GeoDescriptor::LEN]);

impl GeoDescriptor {
    pub const LEN: usize = 12;

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Oracle / baseline rules for picking one proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionRule {
    Conf,
    MinErr,
    MaxIou,
}

impl SelectionRule {
    pub const ALL: [SelectionRule; 3] = [Self::Conf, Self::MinErr, Self::MaxIou];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Conf => "Conf",
            Self::MinErr => "MinErr",
            Self::MaxIou => "MaxIoU",
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    // areas from the same corner differences keep iou(a, a) exactly 1
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn center_error(a: &BBox, b: &BBox) -> f64 {
    (a.cx - b.cx).hypot(a.cy - b.cy)
}

/// Moves the center by `d` along `theta` and scales the extent per axis.
///
/// Width and height are floored at one pixel.
pub fn polar_update(base: &BBox, corr: &PolarCorrection) -> BBox {
    let (sin, cos) = corr.theta.sin_cos();
    BBox {
        cx: base.cx + corr.d * cos,
        cy: base.cy + corr.d * sin,
        w: (base.w * corr.s_w).max(1.0),
        h: (base.h * corr.s_h).max(1.0),
    }
}

pub fn geo_descriptor(current: &BBox, reference: &BBox, dims: FrameDims) -> GeoDescriptor {
    let w = dims.width as f64;
    let h = dims.height as f64;
    GeoDescriptor([
        current.cx / w,
        current.cy / h,
        current.w / w,
        current.h / h,
        reference.cx / w,
        reference.cy / h,
        reference.w / w,
        reference.h / h,
        (current.cx - reference.cx) / w,
        (current.cy - reference.cy) / h,
        (current.w / reference.w).ln(),
        (current.h / reference.h).ln(),
    ])
}

/// Maps an image-space box onto a pyramid level. No rounding.
pub fn map_to_level(b: &BBox, level_stride: u32) -> BBox {
    let s = level_stride as f64;
    BBox::new(b.cx / s, b.cy / s, b.w / s, b.h / s)
}

/// Index of the smallest key; the lowest index wins ties.
pub fn argmin_by<T>(items: impl IntoIterator<Item = T>, key: impl Fn(&T) -> f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, item) in items.into_iter().enumerate() {
        let v = key(&item);
        match best {
            Some((_, b)) if !(v < b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Index of the largest key; the lowest index wins ties.
pub fn argmax_by<T>(items: impl IntoIterator<Item = T>, key: impl Fn(&T) -> f64) -> Option<usize> {
    argmin_by(items, |t| -key(t))
}

/// Picks one proposal by `rule` and returns `(index, box)`.
pub fn select_reference_box(
    proposals: &ProposalSet,
    gt: &BBox,
    rule: SelectionRule,
) -> Result<(usize, BBox)> {
    let entries = &proposals.entries;
    let idx = match rule {
        SelectionRule::Conf => argmax_by(entries, |p| p.confidence),
        SelectionRule::MinErr => argmin_by(entries, |p| center_error(&p.bbox, gt)),
        SelectionRule::MaxIou => argmax_by(entries, |p| iou(&p.bbox, gt)),
    }
    .ok_or(Error::NoProposals)?;
    Ok((idx, entries[idx].bbox))
}
