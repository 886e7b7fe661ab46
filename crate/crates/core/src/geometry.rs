//! Box geometry on the pixel grid.
//!
//! Coordinates are 0-based and inclusive, so a box `(x1, y1, x2, y2)` covers
//! `(x2 - x1 + 1) * (y2 - y1 + 1)` pixels. Boxes carry real coordinates
//! (regression produces fractional corners); every pixel-level operation first
//! rounds them half-away-from-zero onto the integer grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    /// The box covering the whole image.
    pub fn full_box(&self) -> BoxF {
        BoxF {
            x1: 0.0,
            y1: 0.0,
            x2: self.width as f64 - 1.0,
            y2: self.height as f64 - 1.0,
        }
    }
}

/// A candidate or ground-truth box with real-valued inclusive corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxF {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxF {
    /// Checked constructor: corners must be finite and ordered.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox { x1, y1, x2, y2 })
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1 + 1.0
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1 + 1.0
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x1 + 0.5 * self.width(), self.y1 + 0.5 * self.height())
    }

    /// Rebuilds a box from its center and size (inverse of [`BoxF::center`]).
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        let x1 = cx - 0.5 * w;
        let y1 = cy - 0.5 * h;
        Self {
            x1,
            y1,
            x2: x1 + w - 1.0,
            y2: y1 + h - 1.0,
        }
    }

    pub fn round(&self) -> PixelRect {
        PixelRect {
            x1: self.x1.round() as i64,
            y1: self.y1.round() as i64,
            x2: self.x2.round() as i64,
            y2: self.y2.round() as i64,
        }
    }

    /// Clamps every corner into the image.
    pub fn clip(&self, dims: ImageDims) -> Self {
        let max_x = dims.width as f64 - 1.0;
        let max_y = dims.height as f64 - 1.0;
        let x1 = self.x1.clamp(0.0, max_x);
        let y1 = self.y1.clamp(0.0, max_y);
        Self {
            x1,
            y1,
            x2: self.x2.clamp(x1, max_x),
            y2: self.y2.clamp(y1, max_y),
        }
    }

    pub fn is_inside(&self, dims: ImageDims) -> bool {
        self.x1 >= 0.0
            && self.y1 >= 0.0
            && self.x2 <= dims.width as f64 - 1.0
            && self.y2 <= dims.height as f64 - 1.0
    }
}

/// An integer pixel rectangle, inclusive on both ends.
///
/// A rectangle with `x2 < x1` or `y2 < y1` is empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PixelRect {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

impl PixelRect {
    pub fn is_empty(&self) -> bool {
        self.x2 < self.x1 || self.y2 < self.y1
    }

    pub fn area(&self) -> u64 {
        if self.is_empty() {
            0
        } else {
            ((self.x2 - self.x1 + 1) * (self.y2 - self.y1 + 1)) as u64
        }
    }

    pub fn intersect(&self, other: &PixelRect) -> PixelRect {
        PixelRect {
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
            x2: self.x2.min(other.x2),
            y2: self.y2.min(other.y2),
        }
    }

    /// Restricts the rectangle to the pixels that exist in the image.
    pub fn clip(&self, dims: ImageDims) -> PixelRect {
        self.intersect(&PixelRect {
            x1: 0,
            y1: 0,
            x2: dims.width as i64 - 1,
            y2: dims.height as i64 - 1,
        })
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn to_box(&self) -> BoxF {
        BoxF {
            x1: self.x1 as f64,
            y1: self.y1 as f64,
            x2: self.x2 as f64,
            y2: self.y2 as f64,
        }
    }
}

/// Intersection-over-union on the integer grid. A box that is empty after
/// rounding overlaps only with an identical box.
pub fn iou(a: &BoxF, b: &BoxF) -> f64 {
    rect_iou(&a.round(), &b.round())
}

pub fn rect_iou(a: &PixelRect, b: &PixelRect) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a == b { 1.0 } else { 0.0 };
    }
    let inter = a.intersect(b).area();
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Grows a box by `rho` times its width on each horizontal side and `rho`
/// times its height on each vertical side, then clips it to the image.
pub fn expand_box(b: &BoxF, rho: f64, dims: ImageDims) -> BoxF {
    let dx = rho * b.width();
    let dy = rho * b.height();
    BoxF {
        x1: b.x1 - dx,
        y1: b.y1 - dy,
        x2: b.x2 + dx,
        y2: b.y2 + dy,
    }
    .clip(dims)
}
