//! Axis-aligned boxes, circular lens selections and their overlap measures.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box must have positive width and height, got {width}x{height}")]
    DegenerateBox { width: f64, height: f64 },
    #[error("circle radius must be positive, got {0}")]
    NonPositiveRadius(f64),
    #[error("non-finite coordinate")]
    NonFinite,
}

/// Axis-aligned box stored as `(x_min, y_min, width, height)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Deserialize)]
struct RawBox {
    x_min: f64,
    y_min: f64,
    width: f64,
    height: f64,
}

impl TryFrom<RawBox> for BBox {
    type Error = GeometryError;

    fn try_from(raw: RawBox) -> Result<Self, Self::Error> {
        BBox::new(raw.x_min, raw.y_min, raw.width, raw.height)
    }
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, width: f64, height: f64) -> Result<Self, GeometryError> {
        if ![x_min, y_min, width, height].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if width <= 0.0 || height <= 0.0 {
            return Err(GeometryError::DegenerateBox { width, height });
        }
        Ok(Self {
            x_min,
            y_min,
            width,
            height,
        })
    }

    /// Builds a box from its center and size.
    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Result<Self, GeometryError> {
        Self::new(cx - width / 2.0, cy - height / 2.0, width, height)
    }

    pub fn x_max(&self) -> f64 {
        self.x_min + self.width
    }

    pub fn y_max(&self) -> f64 {
        self.y_min + self.height
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x_min + self.width / 2.0, self.y_min + self.height / 2.0)
    }

    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }

    pub fn params(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width, self.height]
    }

    /// True when the box lies inside `[0, w] x [0, h]`.
    pub fn within(&self, w: f64, h: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max() <= w && self.y_max() <= h
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.x_max().min(other.x_max()) - self.x_min.max(other.x_min);
        let ih = self.y_max().min(other.y_max()) - self.y_min.max(other.y_min);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }
}

/// Center `(x, y)` of a box.
pub fn box_center(b: &BBox) -> (f64, f64) {
    b.center()
}

/// Standard intersection-over-union of two boxes.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Circular area selected with the magnifier lens, in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCircle")]
pub struct CircleSelection {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

#[derive(Deserialize)]
struct RawCircle {
    cx: f64,
    cy: f64,
    radius: f64,
}

impl TryFrom<RawCircle> for CircleSelection {
    type Error = GeometryError;

    fn try_from(raw: RawCircle) -> Result<Self, Self::Error> {
        CircleSelection::new(raw.cx, raw.cy, raw.radius)
    }
}

impl CircleSelection {
    pub fn new(cx: f64, cy: f64, radius: f64) -> Result<Self, GeometryError> {
        if ![cx, cy, radius].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if radius <= 0.0 {
            return Err(GeometryError::NonPositiveRadius(radius));
        }
        Ok(Self { cx, cy, radius })
    }

    pub fn area(&self) -> f64 {
        PI * self.radius * self.radius
    }

    /// Exact area of the disk clipped to the rectangle `[x0, x1] x [y0, y1]`.
    pub fn intersection_area_rect(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
        disk_rect_area(self.radius, x0 - self.cx, y0 - self.cy, x1 - self.cx, y1 - self.cy)
    }

    pub fn intersection_area(&self, b: &BBox) -> f64 {
        self.intersection_area_rect(b.x_min, b.y_min, b.x_max(), b.y_max())
    }
}

/// Intersection-over-union between a lens disk and a box.
pub fn circle_box_iou(sel: &CircleSelection, b: &BBox) -> f64 {
    let inter = sel.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = sel.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

// Antiderivative of sqrt(r^2 - x^2) on [-r, r].
fn half_chord_integral(r: f64, x: f64) -> f64 {
    let x = x.clamp(-r, r);
    let s = (r * r - x * x).max(0.0).sqrt();
    0.5 * (x * s + r * r * (x / r).clamp(-1.0, 1.0).asin())
}

/// Area of the origin-centred disk of radius `r` inside `[x0, x1] x [y0, y1]`.
///
/// The vertical extent of the region at abscissa `x` is
/// `min(y1, s(x)) - max(y0, -s(x))` with `s(x) = sqrt(r^2 - x^2)`. Splitting the
/// integration range where either horizontal edge meets the circle leaves
/// pieces on which both bounds are a fixed branch (constant or `+-s`), each
/// integrated in closed form.
pub(crate) fn disk_rect_area(r: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let a = x0.max(-r);
    let b = x1.min(r);
    if a >= b || y0 >= y1 || y0 >= r || y1 <= -r {
        return 0.0;
    }

    let mut cuts = vec![a, b];
    for y in [y0, y1] {
        if y.abs() < r {
            let w = (r * r - y * y).sqrt();
            for c in [-w, w] {
                if c > a && c < b {
                    cuts.push(c);
                }
            }
        }
    }
    cuts.sort_by(f64::total_cmp);

    let mut area = 0.0;
    for pair in cuts.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        if hi <= lo {
            continue;
        }
        let mid = 0.5 * (lo + hi);
        let s_mid = (r * r - mid * mid).max(0.0).sqrt();
        let top_is_edge = y1 < s_mid;
        let bottom_is_edge = y0 > -s_mid;
        let top = if top_is_edge { y1 } else { s_mid };
        let bottom = if bottom_is_edge { y0 } else { -s_mid };
        if top <= bottom {
            continue;
        }
        let chord = half_chord_integral(r, hi) - half_chord_integral(r, lo);
        let width = hi - lo;
        let top_int = if top_is_edge { y1 * width } else { chord };
        let bottom_int = if bottom_is_edge { y0 * width } else { -chord };
        area += top_int - bottom_int;
    }
    area.max(0.0)
}
