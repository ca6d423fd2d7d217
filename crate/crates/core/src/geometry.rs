//! Box representations, conversions, IoU and GIoU primitives shared by the
//! loss, pair-wise NMS and evaluation code.
//!
//! Boxes come in two views: normalized center-size (`BoundingBox`, the
//! model-side form) and absolute corners (`Corners`, the evaluation-side
//! form). Areas are continuous, `(x2 - x1) * (y2 - y1)`, with no pixel-grid
//! `+1` convention. Zero-area boxes are legal inputs everywhere and
//! contribute zero overlap.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in normalized center-size form. All fields in `[0, 1]`
/// relative to image size; `w >= 0`, `h >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Axis-aligned box in corner form, `x1 <= x2`, `y1 <= y2`. Coordinates are
/// absolute pixels when produced by [`BoundingBox::to_corners`], or unit
/// coordinates when produced by [`BoundingBox::to_unit_corners`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// Checks the normalized-form invariants: sizes nonnegative, all fields
    /// in `[0, 1]`, and the corner view inside the unit square.
    pub fn is_valid(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        self.w >= 0.0
            && self.h >= 0.0
            && in_unit(self.cx)
            && in_unit(self.cy)
            && in_unit(self.w)
            && in_unit(self.h)
    }

    /// Corner view in absolute pixels for an `img_w` x `img_h` image.
    pub fn to_corners(&self, img_w: f64, img_h: f64) -> Result<Corners, GeometryError> {
        if img_w <= 0.0 || img_h <= 0.0 {
            return Err(GeometryError::NonPositiveImageDims { img_w, img_h });
        }
        Ok(Corners {
            x1: (self.cx - self.w / 2.0) * img_w,
            y1: (self.cy - self.h / 2.0) * img_h,
            x2: (self.cx + self.w / 2.0) * img_w,
            y2: (self.cy + self.h / 2.0) * img_h,
        })
    }

    /// Corner view in the unit coordinate frame (image size 1 x 1).
    pub fn to_unit_corners(&self) -> Corners {
        Corners {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }

    /// IoU of two boxes in the same normalized frame.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        self.to_unit_corners().iou(&other.to_unit_corners())
    }

    /// GIoU of two boxes in the same normalized frame.
    pub fn giou(&self, other: &BoundingBox) -> f64 {
        self.to_unit_corners().giou(&other.to_unit_corners())
    }
}

impl Corners {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Center-size view relative to an `img_w` x `img_h` image. Inverse of
    /// [`BoundingBox::to_corners`].
    pub fn to_center_size(&self, img_w: f64, img_h: f64) -> Result<BoundingBox, GeometryError> {
        if img_w <= 0.0 || img_h <= 0.0 {
            return Err(GeometryError::NonPositiveImageDims { img_w, img_h });
        }
        Ok(BoundingBox {
            cx: (self.x1 + self.x2) / 2.0 / img_w,
            cy: (self.y1 + self.y2) / 2.0 / img_h,
            w: (self.x2 - self.x1) / img_w,
            h: (self.y2 - self.y1) / img_h,
        })
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    fn intersection_area(&self, other: &Corners) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        iw * ih
    }

    /// Intersection over union. Returns 0 when the union is empty (two
    /// degenerate zero-area boxes).
    pub fn iou(&self, other: &Corners) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Generalized IoU: IoU minus the fraction of the smallest enclosing box
    /// not covered by the union. Range `(-1, 1]`; `giou <= iou` always.
    pub fn giou(&self, other: &Corners) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        let iou = if union <= 0.0 { 0.0 } else { inter / union };
        let ew = self.x2.max(other.x2) - self.x1.min(other.x1);
        let eh = self.y2.max(other.y2) - self.y1.min(other.y1);
        let enclose = ew * eh;
        if enclose <= 0.0 {
            return iou;
        }
        iou - (enclose - union) / enclose
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("image dimensions must be positive, got {img_w} x {img_h}")]
    NonPositiveImageDims { img_w: f64, img_h: f64 },
}
