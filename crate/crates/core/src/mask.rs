//! Binary masks with exact set algebra, morphology, bounding boxes and the
//! region/boundary scores used throughout the crate.
//!
//! Masks are plain row-major membership rasters. Dilation paints each
//! foreground run widened by the element's row span; erosion checks row spans
//! against per-row prefix sums. Either way an element's width costs nothing.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask dimensions must be at least 1x1, got {width}x{height}")]
    InvalidDimensions { width: usize, height: usize },
    #[error("expected {expected} pixels for the given dimensions, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("IoU is undefined when both masks are empty")]
    BothEmpty,
    #[error("mask has no foreground pixels")]
    EmptyMask,
}

/// A 2-D foreground/background raster.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("area", &self.area())
            .finish()
    }
}

impl BinaryMask {
    /// An all-background mask.
    pub fn new(width: usize, height: usize) -> Result<Self, MaskError> {
        if width == 0 || height == 0 {
            return Err(MaskError::InvalidDimensions { width, height });
        }
        Ok(Self {
            width,
            height,
            bits: vec![false; width * height],
        })
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, MaskError> {
        if width == 0 || height == 0 {
            return Err(MaskError::InvalidDimensions { width, height });
        }
        if bits.len() != width * height {
            return Err(MaskError::LengthMismatch {
                expected: width * height,
                actual: bits.len(),
            });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, MaskError> {
        let mut mask = Self::new(width, height)?;
        for y in 0..height {
            for x in 0..width {
                mask.bits[y * width + x] = f(x, y);
            }
        }
        Ok(mask)
    }

    /// Filled axis-aligned rectangle `[x0, x0 + w) x [y0, y0 + h)`, clipped to the canvas.
    pub fn rect(
        width: usize,
        height: usize,
        x0: usize,
        y0: usize,
        w: usize,
        h: usize,
    ) -> Result<Self, MaskError> {
        Self::from_fn(width, height, |x, y| {
            x >= x0 && x < x0 + w && y >= y0 && y < y0 + h
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Foreground coordinates in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % w, i / w))
    }

    fn check_dims(&self, other: &BinaryMask) -> Result<(), MaskError> {
        if self.dims() != other.dims() {
            return Err(MaskError::DimensionMismatch {
                left: self.dims(),
                right: other.dims(),
            });
        }
        Ok(())
    }

    fn zip_with(
        &self,
        other: &BinaryMask,
        f: impl Fn(bool, bool) -> bool,
    ) -> Result<BinaryMask, MaskError> {
        self.check_dims(other)?;
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            bits,
        })
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask, MaskError> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<BinaryMask, MaskError> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn difference(&self, other: &BinaryMask) -> Result<BinaryMask, MaskError> {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> Result<usize, MaskError> {
        self.check_dims(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count())
    }

    pub fn union_area(&self, other: &BinaryMask) -> Result<usize, MaskError> {
        self.check_dims(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a || b)
            .count())
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> Result<bool, MaskError> {
        self.check_dims(other)?;
        Ok(self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b))
    }

    pub fn is_disjoint(&self, other: &BinaryMask) -> Result<bool, MaskError> {
        Ok(self.intersection_area(other)? == 0)
    }

    /// Number of pixels whose membership differs.
    pub fn hamming(&self, other: &BinaryMask) -> Result<usize, MaskError> {
        self.check_dims(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a != b)
            .count())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementShape {
    Rectangle,
    Ellipse,
}

/// Structuring element centred on the origin.
///
/// A rectangle covers `|dx| <= half_width, |dy| <= half_height`. An ellipse
/// covers the offsets inside the ellipse whose semi-axes are inflated by half
/// a pixel, so the `(0, 0)` element is the single-pixel identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StructuringElement {
    pub shape: ElementShape,
    pub half_width: usize,
    pub half_height: usize,
}

impl StructuringElement {
    pub const IDENTITY: StructuringElement = StructuringElement::rect(0, 0);

    pub const fn rect(half_width: usize, half_height: usize) -> Self {
        Self {
            shape: ElementShape::Rectangle,
            half_width,
            half_height,
        }
    }

    pub const fn ellipse(half_width: usize, half_height: usize) -> Self {
        Self {
            shape: ElementShape::Ellipse,
            half_width,
            half_height,
        }
    }

    /// 3x3 square.
    pub const fn unit() -> Self {
        Self::rect(1, 1)
    }

    pub fn contains_offset(&self, dx: isize, dy: isize) -> bool {
        let (ax, ay) = (dx.unsigned_abs(), dy.unsigned_abs());
        if ax > self.half_width || ay > self.half_height {
            return false;
        }
        match self.shape {
            ElementShape::Rectangle => true,
            ElementShape::Ellipse => {
                // (dx / (a + 1/2))^2 + (dy / (b + 1/2))^2 <= 1, scaled by 4(a+1/2)^2(b+1/2)^2.
                let a2 = (2 * self.half_width + 1) as u128;
                let b2 = (2 * self.half_height + 1) as u128;
                let (ax, ay) = (2 * ax as u128, 2 * ay as u128);
                ax * ax * b2 * b2 + ay * ay * a2 * a2 <= a2 * a2 * b2 * b2
            }
        }
    }

    /// Horizontal half-extent of the footprint for each row offset `dy`.
    fn row_spans(&self) -> Vec<(isize, usize)> {
        let hh = self.half_height as isize;
        (-hh..=hh)
            .map(|dy| {
                let w = match self.shape {
                    ElementShape::Rectangle => self.half_width,
                    ElementShape::Ellipse => (0..=self.half_width)
                        .rev()
                        .find(|&dx| self.contains_offset(dx as isize, dy))
                        .unwrap_or(0),
                };
                (dy, w)
            })
            .collect()
    }

    /// Every offset in the footprint.
    pub fn footprint(&self) -> Vec<(isize, isize)> {
        let (hw, hh) = (self.half_width as isize, self.half_height as isize);
        let mut out = Vec::new();
        for dy in -hh..=hh {
            for dx in -hw..=hw {
                if self.contains_offset(dx, dy) {
                    out.push((dx, dy));
                }
            }
        }
        out
    }

    pub fn footprint_len(&self) -> usize {
        self.row_spans().iter().map(|&(_, w)| 2 * w + 1).sum()
    }
}

fn row_prefix_sums(m: &BinaryMask) -> Vec<Vec<u32>> {
    (0..m.height)
        .map(|y| {
            let row = &m.bits[y * m.width..(y + 1) * m.width];
            let mut acc = Vec::with_capacity(m.width + 1);
            acc.push(0u32);
            let mut s = 0u32;
            for &b in row {
                s += b as u32;
                acc.push(s);
            }
            acc
        })
        .collect()
}

/// Foreground runs `(first, last)` of each row, inclusive.
fn row_runs(m: &BinaryMask) -> Vec<Vec<(usize, usize)>> {
    (0..m.height)
        .map(|y| {
            let row = &m.bits[y * m.width..(y + 1) * m.width];
            let mut runs = Vec::new();
            let mut x = 0;
            while x < row.len() {
                if row[x] {
                    let start = x;
                    while x < row.len() && row[x] {
                        x += 1;
                    }
                    runs.push((start, x - 1));
                } else {
                    x += 1;
                }
            }
            runs
        })
        .collect()
}

/// Pixels outside the canvas are discarded.
pub fn dilate(m: &BinaryMask, element: &StructuringElement) -> BinaryMask {
    let spans = element.row_spans();
    let runs = row_runs(m);
    let (w, h) = (m.width, m.height as isize);
    let mut out = vec![false; m.bits.len()];
    for y in 0..h {
        let line = &mut out[y as usize * w..(y as usize + 1) * w];
        for &(dy, half) in &spans {
            let r = y + dy;
            if r < 0 || r >= h {
                continue;
            }
            for &(a, b) in &runs[r as usize] {
                let lo = a.saturating_sub(half);
                let hi = (b + half).min(w - 1);
                line[lo..=hi].fill(true);
            }
        }
    }
    BinaryMask {
        width: m.width,
        height: m.height,
        bits: out,
    }
}

/// Positions off the canvas count as background, so erosion eats pixels
/// within reach of the image border.
pub fn erode(m: &BinaryMask, element: &StructuringElement) -> BinaryMask {
    let spans = element.row_spans();
    let sums = row_prefix_sums(m);
    let (w, h) = (m.width as isize, m.height as isize);
    let mut out = vec![false; m.bits.len()];
    for y in 0..h {
        for x in 0..w {
            if !m.bits[(y * w + x) as usize] {
                continue;
            }
            out[(y * w + x) as usize] = spans.iter().all(|&(dy, half)| {
                let r = y + dy;
                let half = half as isize;
                if r < 0 || r >= h || x - half < 0 || x + half >= w {
                    return false;
                }
                let row = &sums[r as usize];
                (row[(x + half + 1) as usize] - row[(x - half) as usize]) as isize == 2 * half + 1
            });
        }
    }
    BinaryMask {
        width: m.width,
        height: m.height,
        bits: out,
    }
}

/// Foreground pixels with at least one 4-neighbour that is background or off-image.
pub fn boundary(m: &BinaryMask) -> BinaryMask {
    let (w, h) = (m.width, m.height);
    let mut out = vec![false; m.bits.len()];
    for y in 0..h {
        for x in 0..w {
            if !m.get(x, y) {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !m.get(x - 1, y)
                || !m.get(x + 1, y)
                || !m.get(x, y - 1)
                || !m.get(x, y + 1);
            out[y * w + x] = edge;
        }
    }
    BinaryMask {
        width: w,
        height: h,
        bits: out,
    }
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn area(&self) -> usize {
        (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> usize {
        let x0 = self.x_min.max(other.x_min);
        let y0 = self.y_min.max(other.y_min);
        let x1 = self.x_max.min(other.x_max);
        let y1 = self.y_max.min(other.y_max);
        if x0 > x1 || y0 > y1 {
            0
        } else {
            (x1 - x0 + 1) * (y1 - y0 + 1)
        }
    }
}

pub fn bbox(m: &BinaryMask) -> Result<BoundingBox, MaskError> {
    let mut it = m.foreground();
    let (x, y) = it.next().ok_or(MaskError::EmptyMask)?;
    let mut b = BoundingBox {
        x_min: x,
        y_min: y,
        x_max: x,
        y_max: y,
    };
    for (x, y) in it {
        b.x_min = b.x_min.min(x);
        b.x_max = b.x_max.max(x);
        b.y_max = b.y_max.max(y);
    }
    Ok(b)
}

pub fn bbox_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// `|a ∩ b| / |a ∪ b|`.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MaskError> {
    let union = a.union_area(b)?;
    if union == 0 {
        return Err(MaskError::BothEmpty);
    }
    Ok(a.intersection_area(b)? as f64 / union as f64)
}

/// `ceil(0.8% of the image diagonal)`, at least one pixel.
pub fn default_boundary_tolerance(width: usize, height: usize) -> usize {
    let diag = ((width * width + height * height) as f64).sqrt();
    ((0.008 * diag).ceil() as usize).max(1)
}

/// Region Jaccard and tolerance-matched contour F-measure.
///
/// A boundary pixel of one mask matches when it lies within a square of
/// half-size `tolerance` around some boundary pixel of the other. Two empty
/// masks score `(1, 1)`.
pub fn jaccard_and_boundary_f(
    pred: &BinaryMask,
    gt: &BinaryMask,
    tolerance: usize,
) -> Result<(f64, f64), MaskError> {
    pred.check_dims(gt)?;
    let j = match mask_iou(pred, gt) {
        Ok(v) => v,
        Err(MaskError::BothEmpty) => 1.0,
        Err(e) => return Err(e),
    };

    let pb = boundary(pred);
    let gb = boundary(gt);
    let (np, ng) = (pb.area(), gb.area());
    let f = match (np, ng) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => {
            let element = StructuringElement::rect(tolerance, tolerance);
            let gt_zone = dilate(&gb, &element);
            let pred_zone = dilate(&pb, &element);
            let precision = pb.intersection_area(&gt_zone)? as f64 / np as f64;
            let recall = gb.intersection_area(&pred_zone)? as f64 / ng as f64;
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        }
    };
    Ok((j, f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(canvas: usize, x0: usize, y0: usize, side: usize) -> BinaryMask {
        BinaryMask::rect(canvas, canvas, x0, y0, side, side).unwrap()
    }

    #[test]
    fn zero_sized_mask_is_rejected() {
        assert!(matches!(
            BinaryMask::new(0, 4),
            Err(MaskError::InvalidDimensions { .. })
        ));
        assert!(matches!(
            BinaryMask::from_bits(2, 2, vec![true; 3]),
            Err(MaskError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn iou_identity_disjoint_and_padding() {
        let a = square(32, 5, 5, 10);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);

        let far = square(32, 20, 20, 5);
        assert_eq!(mask_iou(&a, &far).unwrap(), 0.0);

        let mut b = a.clone();
        for x in 0..20 {
            b.set(x, 30, true);
        }
        assert!((mask_iou(&a, &b).unwrap() - 100.0 / 120.0).abs() < 1e-15);
        assert_eq!(mask_iou(&a, &b).unwrap(), mask_iou(&b, &a).unwrap());
    }

    #[test]
    fn iou_errors() {
        let e = BinaryMask::new(4, 4).unwrap();
        assert_eq!(mask_iou(&e, &e), Err(MaskError::BothEmpty));
        let other = BinaryMask::new(5, 4).unwrap();
        assert!(matches!(
            mask_iou(&e, &other),
            Err(MaskError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dilate_square_by_unit() {
        let m = square(32, 11, 11, 10);
        assert_eq!(dilate(&m, &StructuringElement::IDENTITY), m);
        let d = dilate(&m, &StructuringElement::unit());
        assert_eq!(d.area(), 144);
        assert_eq!(d, square(32, 10, 10, 12));
        let e = BinaryMask::new(8, 8).unwrap();
        assert!(dilate(&e, &StructuringElement::ellipse(3, 2)).is_empty());
    }

    #[test]
    fn dilate_clips_at_border() {
        let mut m = BinaryMask::new(5, 5).unwrap();
        m.set(0, 0, true);
        let d = dilate(&m, &StructuringElement::unit());
        assert_eq!(d.area(), 4);
    }

    #[test]
    fn erode_square_by_unit() {
        let m = square(32, 11, 11, 10);
        assert_eq!(erode(&m, &StructuringElement::IDENTITY), m);
        let e = erode(&m, &StructuringElement::unit());
        assert_eq!(e.area(), 64);
        assert_eq!(e, square(32, 12, 12, 8));

        let line = BinaryMask::rect(16, 16, 2, 5, 10, 1).unwrap();
        assert!(erode(&line, &StructuringElement::unit()).is_empty());
    }

    #[test]
    fn erode_treats_border_as_background() {
        let full = BinaryMask::from_fn(6, 6, |_, _| true).unwrap();
        let e = erode(&full, &StructuringElement::unit());
        assert_eq!(e, BinaryMask::rect(6, 6, 1, 1, 4, 4).unwrap());
    }

    #[test]
    fn ellipse_footprints() {
        assert_eq!(StructuringElement::ellipse(0, 0).footprint(), vec![(0, 0)]);
        // radius 1 inflated to 1.5: the corners (1,1) fall at sqrt(2)/1.5 < 1.
        assert_eq!(StructuringElement::ellipse(1, 1).footprint_len(), 9);
        // radius 2 inflated to 2.5: (2,2) is out, (2,1) is in.
        let e = StructuringElement::ellipse(2, 2);
        assert!(!e.contains_offset(2, 2));
        assert!(e.contains_offset(2, 1));
        assert_eq!(e.footprint_len(), 21);
        assert_eq!(e.footprint().len(), e.footprint_len());
    }

    #[test]
    fn boundary_cases() {
        let mut single = BinaryMask::new(5, 5).unwrap();
        single.set(2, 2, true);
        assert_eq!(boundary(&single), single);

        let sq = square(32, 11, 11, 10);
        let b = boundary(&sq);
        assert_eq!(b.area(), 36);
        assert_eq!(b, sq.difference(&square(32, 12, 12, 8)).unwrap());

        assert!(boundary(&BinaryMask::new(3, 3).unwrap()).is_empty());
    }

    #[test]
    fn bbox_and_bbox_iou() {
        let sq = square(32, 3, 4, 10);
        let b = bbox(&sq).unwrap();
        assert_eq!(
            b,
            BoundingBox {
                x_min: 3,
                y_min: 4,
                x_max: 12,
                y_max: 13
            }
        );
        assert_eq!(bbox_iou(&b, &b), 1.0);

        let left = BoundingBox {
            x_min: 0,
            y_min: 0,
            x_max: 9,
            y_max: 9,
        };
        let right = BoundingBox {
            x_min: 5,
            y_min: 0,
            x_max: 14,
            y_max: 9,
        };
        assert!((bbox_iou(&left, &right) - 50.0 / 150.0).abs() < 1e-15);
        let far = BoundingBox {
            x_min: 20,
            y_min: 20,
            x_max: 21,
            y_max: 21,
        };
        assert_eq!(bbox_iou(&left, &far), 0.0);
        assert_eq!(
            bbox(&BinaryMask::new(2, 2).unwrap()),
            Err(MaskError::EmptyMask)
        );
    }

    #[test]
    fn j_and_f_reference_cases() {
        let gt = square(64, 20, 20, 10);
        assert_eq!(jaccard_and_boundary_f(&gt, &gt, 1).unwrap(), (1.0, 1.0));

        let empty = BinaryMask::new(64, 64).unwrap();
        assert_eq!(jaccard_and_boundary_f(&empty, &gt, 1).unwrap(), (0.0, 0.0));
        assert_eq!(
            jaccard_and_boundary_f(&empty, &empty, 1).unwrap(),
            (1.0, 1.0)
        );

        let shifted = square(64, 21, 20, 10);
        let (j, f) = jaccard_and_boundary_f(&shifted, &gt, 1).unwrap();
        assert!((j - 90.0 / 110.0).abs() < 1e-15);
        assert_eq!(f, 1.0);

        // Zero tolerance: only the overlapping boundary pixels match.
        let (_, f0) = jaccard_and_boundary_f(&shifted, &gt, 0).unwrap();
        assert!(f0 < 1.0);
    }

    #[test]
    fn default_tolerance() {
        assert_eq!(default_boundary_tolerance(10, 10), 1);
        // diagonal of 1280x720 is ~1468.6 px; 0.8% is 11.75.
        assert_eq!(default_boundary_tolerance(1280, 720), 12);
    }
}
