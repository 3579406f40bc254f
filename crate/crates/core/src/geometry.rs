//! Normalized boxes, overlap measures and 2-D affine maps of the unit canvas.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in normalized `(cx, cy, w, h)` form.
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

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `(x1, y1, x2, y2)`
    pub fn to_corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// Intersection with the unit canvas, or `None` if nothing remains.
    pub fn clip_to_canvas(&self) -> Option<BBox> {
        let (x1, y1, x2, y2) = self.to_corners();
        let (x1, y1, x2, y2) = (x1.max(0.0), y1.max(0.0), x2.min(1.0), y2.min(1.0));
        (x2 - x1 > 1e-12 && y2 - y1 > 1e-12).then(|| BBox::from_corners(x1, y1, x2, y2))
    }
}

fn intersection_and_union(a: &BBox, b: &BBox) -> (f64, f64) {
    let (ax1, ay1, ax2, ay2) = a.to_corners();
    let (bx1, by1, bx2, by2) = b.to_corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    (inter, a.area() + b.area() - inter)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (inter, union) = intersection_and_union(a, b);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `iou - (enclosing - union) / enclosing`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let (inter, union) = intersection_and_union(a, b);
    let (ax1, ay1, ax2, ay2) = a.to_corners();
    let (bx1, by1, bx2, by2) = b.to_corners();
    let enclosing = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    if union <= 0.0 || enclosing <= 0.0 {
        return 0.0;
    }
    // Enclosing >= union exactly; rounding can make the gap slightly negative
    // when one box contains the other.
    inter / union - ((enclosing - union) / enclosing).max(0.0)
}

/// Affine map `p -> L p + t` on normalized canvas coordinates, stored row-major
/// as `[[a, b, tx], [c, d, ty]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine2D {
    pub m: [[f64; 3]; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum GeometryError {
    #[error("affine map is not invertible")]
    Singular,
    #[error("box is degenerate after transform")]
    Degenerate,
}

impl Default for Affine2D {
    fn default() -> Self {
        Self::identity()
    }
}

impl Affine2D {
    pub const fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty]],
        }
    }

    /// Linear part `l` applied about the fixed point `(px, py)`.
    pub fn about(l: [[f64; 2]; 2], px: f64, py: f64) -> Self {
        let tx = px - (l[0][0] * px + l[0][1] * py);
        let ty = py - (l[1][0] * px + l[1][1] * py);
        Self {
            m: [[l[0][0], l[0][1], tx], [l[1][0], l[1][1], ty]],
        }
    }

    pub fn hflip() -> Self {
        Self::about([[-1.0, 0.0], [0.0, 1.0]], 0.5, 0.5)
    }

    pub fn scale_about_center(s: f64) -> Self {
        Self::about([[s, 0.0], [0.0, s]], 0.5, 0.5)
    }

    /// Rotation by `degrees` about the canvas center (y axis points down).
    pub fn rotation(degrees: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        Self::about([[c, -s], [s, c]], 0.5, 0.5)
    }

    /// Shear by angles (degrees) along x and y about the canvas center.
    pub fn shear(sx_deg: f64, sy_deg: f64) -> Self {
        Self::about(
            [[1.0, sx_deg.to_radians().tan()], [sy_deg.to_radians().tan(), 1.0]],
            0.5,
            0.5,
        )
    }

    /// Per-axis rescale anchored at the origin followed by a translation.
    pub fn rescale_translate(sx: f64, sy: f64, tx: f64, ty: f64) -> Self {
        Self {
            m: [[sx, 0.0, tx], [0.0, sy, ty]],
        }
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn is_invertible(&self) -> bool {
        self.det().abs() > 1e-9
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    /// `other ∘ self`: apply `self` first, then `other`.
    pub fn then(&self, other: &Affine2D) -> Affine2D {
        let (a, b) = (&other.m, &self.m);
        let mut m = [[0.0; 3]; 2];
        for i in 0..2 {
            for j in 0..2 {
                m[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
            m[i][2] = a[i][0] * b[0][2] + a[i][1] * b[1][2] + a[i][2];
        }
        Affine2D { m }
    }

    pub fn inverse(&self) -> Result<Affine2D, GeometryError> {
        if !self.is_invertible() {
            return Err(GeometryError::Singular);
        }
        let det = self.det();
        let m = &self.m;
        let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        let tx = -(a * m[0][2] + b * m[1][2]);
        let ty = -(c * m[0][2] + d * m[1][2]);
        Ok(Affine2D {
            m: [[a, b, tx], [c, d, ty]],
        })
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

/// Axis-aligned hull of the transformed corners, clipped to the canvas.
pub fn transform_box(b: &BBox, t: &Affine2D) -> Result<BBox, GeometryError> {
    let (x1, y1, x2, y2) = b.to_corners();
    let pts = [t.apply(x1, y1), t.apply(x2, y1), t.apply(x1, y2), t.apply(x2, y2)];
    let (mut lx, mut ly, mut hx, mut hy) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for (x, y) in pts {
        lx = lx.min(x);
        ly = ly.min(y);
        hx = hx.max(x);
        hy = hy.max(y);
    }
    BBox::from_corners(lx, ly, hx, hy)
        .clip_to_canvas()
        .ok_or(GeometryError::Degenerate)
}

/// Boxes keeping less than this fraction of their unclipped area are dropped.
pub const MIN_VISIBLE_FRACTION: f64 = 0.25;

/// [`transform_box`] plus the visibility rule: a box whose clipped area is
/// below [`MIN_VISIBLE_FRACTION`] of its unclipped transformed area is degenerate.
pub fn transform_box_visible(b: &BBox, t: &Affine2D) -> Result<BBox, GeometryError> {
    let (x1, y1, x2, y2) = b.to_corners();
    let pts = [t.apply(x1, y1), t.apply(x2, y1), t.apply(x1, y2), t.apply(x2, y2)];
    let xs = pts.map(|p| p.0);
    let ys = pts.map(|p| p.1);
    let fold = |v: [f64; 4]| (v.iter().copied().fold(f64::MAX, f64::min), v.iter().copied().fold(f64::MIN, f64::max));
    let ((lx, hx), (ly, hy)) = (fold(xs), fold(ys));
    let full = (hx - lx) * (hy - ly);
    let clipped = transform_box(b, t)?;
    if clipped.area() < MIN_VISIBLE_FRACTION * full {
        return Err(GeometryError::Degenerate);
    }
    Ok(clipped)
}
