use crate::error::{Error, Result};

/// Axis-aligned box in continuous pixel coordinates; pixel `i` spans `[i, i+1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if !(x_min < x_max && y_min < y_max) || ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("degenerate box {b:?}")));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x_min: cx - 0.5 * w,
            y_min: cy - 0.5 * h,
            x_max: cx + 0.5 * w,
            y_max: cy + 0.5 * h,
        }
    }

    /// Clipped to `[0, width] x [0, height]`; `None` when nothing of positive
    /// area remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let b = BBox {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        };
        (b.x_min < b.x_max && b.y_min < b.y_max).then_some(b)
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }
}

/// Intersection over union; zero for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Ground-truth object: a box and its category in `[0, C)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Annotation {
    pub bbox: BBox,
    pub category: usize,
}

/// Box-delta weights for RPN regression targets.
pub const RPN_DELTA_WEIGHTS: [f64; 4] = [1.0, 1.0, 1.0, 1.0];
/// Box-delta weights for RoI-head regression targets.
pub const ROI_DELTA_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];

/// Largest log-scale delta applied while decoding.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Encodes `target` relative to `reference` as weighted
/// `(dx, dy, dw, dh)` deltas.
pub fn encode(reference: &BBox, target: &BBox, weights: [f64; 4]) -> [f64; 4] {
    let (rx, ry) = reference.center();
    let (tx, ty) = target.center();
    let (rw, rh) = (reference.width(), reference.height());
    [
        weights[0] * (tx - rx) / rw,
        weights[1] * (ty - ry) / rh,
        weights[2] * (target.width() / rw).ln(),
        weights[3] * (target.height() / rh).ln(),
    ]
}

/// Inverse of [`encode`]; scale deltas are clamped at [`MAX_LOG_SCALE`].
pub fn decode(reference: &BBox, deltas: [f64; 4], weights: [f64; 4]) -> BBox {
    let (rx, ry) = reference.center();
    let (rw, rh) = (reference.width(), reference.height());
    let dx = deltas[0] / weights[0];
    let dy = deltas[1] / weights[1];
    let dw = (deltas[2] / weights[2]).min(MAX_LOG_SCALE);
    let dh = (deltas[3] / weights[3]).min(MAX_LOG_SCALE);
    BBox::from_center(rx + dx * rw, ry + dy * rh, rw * dw.exp(), rh * dh.exp())
}
