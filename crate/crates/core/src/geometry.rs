//! Axis-aligned boxes in pixel coordinates.

use serde::{Deserialize, Serialize};

/// `[x_min, x_max) × [y_min, y_max)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max && self.as_array().iter().all(|v| v.is_finite())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.x_min * s, self.y_min * s, self.x_max * s, self.y_max * s)
    }

    /// Regression targets `(dx, dy, dw, dh)` taking `self` to `target`,
    /// divided by `weights` as in the usual two-stage detector coder.
    pub fn encode(&self, target: &BBox, weights: [f64; 4]) -> [f64; 4] {
        let (cx, cy) = self.center();
        let (tx, ty) = target.center();
        [
            weights[0] * (tx - cx) / self.width(),
            weights[1] * (ty - cy) / self.height(),
            weights[2] * (target.width() / self.width()).ln(),
            weights[3] * (target.height() / self.height()).ln(),
        ]
    }

    pub fn decode(&self, deltas: [f64; 4], weights: [f64; 4]) -> BBox {
        // Caps exp() so that untrained regressors cannot produce infinite boxes.
        const MAX_LOG_SCALE: f64 = 4.135; // ln(1000 / 16)
        let (cx, cy) = self.center();
        let dx = deltas[0] / weights[0];
        let dy = deltas[1] / weights[1];
        let dw = (deltas[2] / weights[2]).min(MAX_LOG_SCALE);
        let dh = (deltas[3] / weights[3]).min(MAX_LOG_SCALE);
        BBox::from_center(
            cx + dx * self.width(),
            cy + dy * self.height(),
            self.width() * dw.exp(),
            self.height() * dh.exp(),
        )
    }
}

/// Intersection over union; zero when either box is degenerate.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if !a.is_valid() || !b.is_valid() {
        return 0.0;
    }
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}
