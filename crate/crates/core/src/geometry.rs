//! Normalized bounding boxes, IoU / GIoU and the box-regression cost.
//!
//! Boxes live in center form `(cx, cy, w, h)` with every coordinate in the
//! unit square. Overlap measures are computed on the corner form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::MatchWeights;

/// Center-format box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner-format box, `x1 <= x2` and `y1 <= y2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Bbox {
    /// Checked constructor: centers in `[0, 1]`, sizes in `(0, 1]`.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Bbox { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let size = |v: f64| v > 0.0 && v <= 1.0;
        if unit(self.cx) && unit(self.cy) && size(self.w) && size(self.h) {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid box {:?}", self)))
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Bbox { cx: a[0], cy: a[1], w: a[2], h: a[3] }
    }

    pub fn to_corners(self) -> Corners {
        to_corners(self)
    }
}

pub fn to_corners(b: Bbox) -> Corners {
    Corners { x1: b.cx - b.w / 2.0, y1: b.cy - b.h / 2.0, x2: b.cx + b.w / 2.0, y2: b.cy + b.h / 2.0 }
}

impl Corners {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn to_center(self) -> Bbox {
        Bbox {
            cx: (self.x1 + self.x2) / 2.0,
            cy: (self.y1 + self.y2) / 2.0,
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }
}

fn intersection(a: &Corners, b: &Corners) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    iw * ih
}

fn enclosure(a: &Corners, b: &Corners) -> f64 {
    (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1))
}

pub fn iou(a: &Corners, b: &Corners) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

pub fn giou(a: &Corners, b: &Corners) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let hull = enclosure(a, b);
    if union <= 0.0 || hull <= 0.0 {
        return 0.0;
    }
    inter / union - (hull - union) / hull
}

/// GIoU together with its gradient with respect to the corners of `a`,
/// ordered `[x1, y1, x2, y2]`.
fn giou_with_grad(a: &Corners, b: &Corners) -> (f64, [f64; 4]) {
    let ix1_from_a = a.x1 > b.x1;
    let ix2_from_a = a.x2 < b.x2;
    let iy1_from_a = a.y1 > b.y1;
    let iy2_from_a = a.y2 < b.y2;
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    let overlapping = iw > 0.0 && ih > 0.0;
    let inter = if overlapping { iw * ih } else { 0.0 };

    let aw = a.x2 - a.x1;
    let ah = a.y2 - a.y1;
    let union = aw * ah + b.area() - inter;

    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    let hull = cw * ch;

    let value = inter / union - (hull - union) / hull;

    // partials of area(a), inter and hull with respect to x1, y1, x2, y2 of a
    let d_area = [-ah, -aw, ah, aw];
    let mut d_inter = [0.0; 4];
    if overlapping {
        if ix1_from_a {
            d_inter[0] = -ih;
        }
        if ix2_from_a {
            d_inter[2] = ih;
        }
        if iy1_from_a {
            d_inter[1] = -iw;
        }
        if iy2_from_a {
            d_inter[3] = iw;
        }
    }
    let mut d_hull = [0.0; 4];
    if a.x1 < b.x1 {
        d_hull[0] = -ch;
    }
    if a.x2 > b.x2 {
        d_hull[2] = ch;
    }
    if a.y1 < b.y1 {
        d_hull[1] = -cw;
    }
    if a.y2 > b.y2 {
        d_hull[3] = cw;
    }

    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        grad[k] =
            d_inter[k] / union - inter * d_union / (union * union) + d_union / hull - union * d_hull[k] / (hull * hull);
    }
    (value, grad)
}

/// `λ_l1 · Σ|pred − gt|` in center form plus `λ_giou · (1 − giou)`.
pub fn box_cost(pred: &Bbox, gt: &Bbox, weights: &MatchWeights) -> f64 {
    let l1: f64 = pred.to_array().iter().zip(gt.to_array()).map(|(p, g)| (p - g).abs()).sum();
    let g = giou(&pred.to_corners(), &gt.to_corners());
    weights.lambda_l1 * l1 + weights.lambda_giou * (1.0 - g)
}

/// [`box_cost`] and its gradient with respect to `pred` in `(cx, cy, w, h)`.
pub fn box_cost_with_grad(pred: &Bbox, gt: &Bbox, weights: &MatchWeights) -> (f64, [f64; 4]) {
    let p = pred.to_array();
    let g = gt.to_array();
    let mut grad = [0.0; 4];
    let mut l1 = 0.0;
    for k in 0..4 {
        let diff = p[k] - g[k];
        l1 += diff.abs();
        grad[k] = weights.lambda_l1
            * if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
    }
    let (gv, gc) = giou_with_grad(&pred.to_corners(), &gt.to_corners());
    // corners -> center: x1 = cx - w/2, x2 = cx + w/2
    let d_cx = gc[0] + gc[2];
    let d_cy = gc[1] + gc[3];
    let d_w = (gc[2] - gc[0]) / 2.0;
    let d_h = (gc[3] - gc[1]) / 2.0;
    for (k, d) in [d_cx, d_cy, d_w, d_h].into_iter().enumerate() {
        grad[k] -= weights.lambda_giou * d;
    }
    (weights.lambda_l1 * l1 + weights.lambda_giou * (1.0 - gv), grad)
}
