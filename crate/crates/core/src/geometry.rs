//! Axis-aligned 3D box algebra in voxel coordinates.
//!
//! Coordinates are ordered `(z, y, x)`; `z` is the slice axis. A box covers the
//! half-open interval `[min, max)` on every axis, so the voxel with integer index
//! `(k, j, i)` occupies `[k, k+1) x [j, j+1) x [i, i+1)` and a box with integer
//! corners contains exactly `volume()` voxels. Boxes are corner-aligned to voxel
//! boundaries, not voxel centers.
//!
//! The `(w, h, d)` naming used by the aspect-ratio term maps to extents as
//! `w = x`, `h = y`, `d = z`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Axis index of the slice (depth) axis.
pub const Z: usize = 0;
/// Axis index of the in-slice row axis.
pub const Y: usize = 1;
/// Axis index of the in-slice column axis.
pub const X: usize = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate box on axis {axis}: min {min} must be < max {max}")]
    Degenerate { axis: usize, min: f64, max: f64 },
    #[error("non-finite box coordinate on axis {axis}")]
    NonFinite { axis: usize },
    #[error("non-positive size {size} on axis {axis}")]
    NonPositiveSize { axis: usize, size: f64 },
    #[error("invalid volume shape {0:?}: every axis needs at least one voxel")]
    EmptyShape([usize; 3]),
    #[error("invalid voxel spacing {0:?}: every component must be finite and > 0")]
    BadSpacing([f64; 3]),
}

/// Continuous axis-aligned box with strictly positive extent on every axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 6]", into = "[f64; 6]")]
pub struct Box3 {
    min: [f64; 3],
    max: [f64; 3],
}

impl Box3 {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self, GeometryError> {
        for axis in 0..3 {
            if !min[axis].is_finite() || !max[axis].is_finite() {
                return Err(GeometryError::NonFinite { axis });
            }
            if min[axis] >= max[axis] {
                return Err(GeometryError::Degenerate {
                    axis,
                    min: min[axis],
                    max: max[axis],
                });
            }
        }
        Ok(Self { min, max })
    }

    /// Box from `[z1, y1, x1, z2, y2, x2]`.
    pub fn from_corners(c: [f64; 6]) -> Result<Self, GeometryError> {
        Self::new([c[0], c[1], c[2]], [c[3], c[4], c[5]])
    }

    pub fn from_center_size(center: [f64; 3], size: [f64; 3]) -> Result<Self, GeometryError> {
        for axis in 0..3 {
            if !(size[axis] > 0.0) {
                return Err(GeometryError::NonPositiveSize {
                    axis,
                    size: size[axis],
                });
            }
        }
        Self::new(
            std::array::from_fn(|i| center[i] - 0.5 * size[i]),
            std::array::from_fn(|i| center[i] + 0.5 * size[i]),
        )
    }

    /// Box covering exactly the voxels `min..max` (exclusive) per axis.
    pub fn from_voxel_range(min: [usize; 3], max_exclusive: [usize; 3]) -> Result<Self, GeometryError> {
        Self::new(
            min.map(|v| v as f64),
            max_exclusive.map(|v| v as f64),
        )
    }

    pub fn min(&self) -> [f64; 3] {
        self.min
    }

    pub fn max(&self) -> [f64; 3] {
        self.max
    }

    pub fn corners(&self) -> [f64; 6] {
        [
            self.min[0], self.min[1], self.min[2], self.max[0], self.max[1], self.max[2],
        ]
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    pub fn extents(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.extent(i))
    }

    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|i| 0.5 * (self.min[i] + self.max[i]))
    }

    pub fn volume(&self) -> f64 {
        self.extent(0) * self.extent(1) * self.extent(2)
    }

    /// True when `other` lies entirely within `self` (faces may coincide).
    pub fn contains(&self, other: &Box3) -> bool {
        (0..3).all(|i| self.min[i] <= other.min[i] && other.max[i] <= self.max[i])
    }

    /// Half-open point containment.
    pub fn contains_point(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| self.min[i] <= p[i] && p[i] < self.max[i])
    }

    /// Open-interior point containment; points on a face are outside.
    pub fn strictly_contains_point(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| self.min[i] < p[i] && p[i] < self.max[i])
    }

    /// Squared length of the main diagonal.
    pub fn diagonal_sq(&self) -> f64 {
        (0..3).map(|i| self.extent(i).powi(2)).sum()
    }

    pub fn translated(&self, offset: [f64; 3]) -> Box3 {
        Box3 {
            min: std::array::from_fn(|i| self.min[i] + offset[i]),
            max: std::array::from_fn(|i| self.max[i] + offset[i]),
        }
    }
}

impl TryFrom<[f64; 6]> for Box3 {
    type Error = GeometryError;

    fn try_from(c: [f64; 6]) -> Result<Self, Self::Error> {
        Box3::from_corners(c)
    }
}

impl From<Box3> for [f64; 6] {
    fn from(b: Box3) -> Self {
        b.corners()
    }
}

/// Overlap length of two intervals, zero when they do not overlap.
#[inline]
fn overlap(a_min: f64, a_max: f64, b_min: f64, b_max: f64) -> f64 {
    (a_max.min(b_max) - a_min.max(b_min)).max(0.0)
}

pub fn volume(b: &Box3) -> f64 {
    b.volume()
}

pub fn intersection_volume(a: &Box3, b: &Box3) -> f64 {
    (0..3)
        .map(|i| overlap(a.min[i], a.max[i], b.min[i], b.max[i]))
        .product()
}

/// Intersection over union; exactly 1 for identical boxes, 0 when disjoint.
pub fn iou(a: &Box3, b: &Box3) -> f64 {
    let inter = intersection_volume(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    inter / union
}

/// Smallest box containing both inputs.
pub fn enclosing_box(a: &Box3, b: &Box3) -> Box3 {
    Box3 {
        min: std::array::from_fn(|i| a.min[i].min(b.min[i])),
        max: std::array::from_fn(|i| a.max[i].max(b.max[i])),
    }
}

pub fn center_distance_sq(a: &Box3, b: &Box3) -> f64 {
    let (ca, cb) = (a.center(), b.center());
    (0..3).map(|i| (ca[i] - cb[i]).powi(2)).sum()
}

/// `4 / pi^2`, the normaliser that maps each squared arctangent gap into `[0, 1)`.
pub const ASPECT_SCALE: f64 = 4.0 / (PI * PI);

/// The three in-plane ratios `(w/h, h/d, d/w)` of a `(d, h, w)` size vector
/// given in `(z, y, x)` order.
#[inline]
pub fn aspect_ratios(size: [f64; 3]) -> [f64; 3] {
    let (d, h, w) = (size[Z], size[Y], size[X]);
    [w / h, h / d, d / w]
}

/// Aspect-ratio consistency between a predicted and a ground-truth size,
/// summed over the axial, coronal and sagittal planes. Always in `[0, 3)`.
pub fn aspect_term_sizes(pred: [f64; 3], gt: [f64; 3]) -> f64 {
    let rp = aspect_ratios(pred);
    let rg = aspect_ratios(gt);
    ASPECT_SCALE
        * (0..3)
            .map(|k| (rg[k].atan() - rp[k].atan()).powi(2))
            .sum::<f64>()
}

pub fn aspect_term(pred: &Box3, gt: &Box3) -> f64 {
    aspect_term_sizes(pred.extents(), gt.extents())
}

/// Voxel spacing in millimetres, `(z, y, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct Spacing([f64; 3]);

impl Spacing {
    pub fn new(mm: [f64; 3]) -> Result<Self, GeometryError> {
        if mm.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(Self(mm))
        } else {
            Err(GeometryError::BadSpacing(mm))
        }
    }

    pub fn isotropic() -> Self {
        Self([1.0; 3])
    }

    pub fn mm(&self) -> [f64; 3] {
        self.0
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.0[0] * self.0[1] * self.0[2]
    }

    /// Physical volume of a box in cubic centimetres.
    pub fn volume_cm3(&self, b: &Box3) -> f64 {
        b.volume() * self.voxel_volume_mm3() / 1000.0
    }
}

impl TryFrom<[f64; 3]> for Spacing {
    type Error = GeometryError;

    fn try_from(mm: [f64; 3]) -> Result<Self, Self::Error> {
        Spacing::new(mm)
    }
}

impl From<Spacing> for [f64; 3] {
    fn from(s: Spacing) -> Self {
        s.0
    }
}

/// Grid shape plus physical voxel spacing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeMeta {
    shape: [usize; 3],
    spacing: Spacing,
}

impl VolumeMeta {
    pub fn new(shape: [usize; 3], spacing_mm: [f64; 3]) -> Result<Self, GeometryError> {
        if shape.contains(&0) {
            return Err(GeometryError::EmptyShape(shape));
        }
        Ok(Self {
            shape,
            spacing: Spacing::new(spacing_mm)?,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn voxel_count(&self) -> usize {
        self.shape.iter().product()
    }

    /// The whole grid as a box.
    pub fn bounds(&self) -> Box3 {
        Box3 {
            min: [0.0; 3],
            max: self.shape.map(|s| s as f64),
        }
    }

    pub fn physical_volume_cm3(&self, b: &Box3) -> f64 {
        self.spacing.volume_cm3(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(c: [f64; 6]) -> Box3 {
        Box3::from_corners(c).unwrap()
    }

    #[test]
    fn volumes() {
        assert_eq!(b([0., 0., 0., 1., 1., 1.]).volume(), 1.0);
        assert_eq!(b([0., 0., 0., 2., 3., 4.]).volume(), 24.0);
        assert_eq!(b([1.5, 0., 0., 2.5, 2., 2.]).volume(), 4.0);
    }

    #[test]
    fn rejects_degenerate() {
        assert!(matches!(
            Box3::from_corners([0., 0., 0., 0., 1., 1.]),
            Err(GeometryError::Degenerate { axis: 0, .. })
        ));
        assert!(Box3::from_corners([0., 2., 0., 1., 1., 1.]).is_err());
        assert!(Box3::from_corners([0., 0., f64::NAN, 1., 1., 1.]).is_err());
        assert!(Box3::from_center_size([0.; 3], [1., 0., 1.]).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = b([0., 0., 0., 2., 2., 2.]);
        assert_eq!(iou(&a, &a), 1.0);
        let c = b([1., 1., 1., 3., 3., 3.]);
        assert_eq!(iou(&a, &c), 1.0 / 15.0);
        assert_eq!(iou(&c, &a), 1.0 / 15.0);
        let u = b([0., 0., 0., 1., 1., 1.]);
        let far = b([5., 5., 5., 6., 6., 6.]);
        assert_eq!(iou(&u, &far), 0.0);
        // touching faces share no volume
        let touch = b([1., 0., 0., 2., 1., 1.]);
        assert_eq!(iou(&u, &touch), 0.0);
    }

    #[test]
    fn enclosing_examples() {
        let a = b([0., 0., 0., 1., 1., 1.]);
        assert_eq!(enclosing_box(&a, &a), a);
        let c = b([2., 2., 2., 3., 3., 3.]);
        assert_eq!(enclosing_box(&a, &c), b([0., 0., 0., 3., 3., 3.]));
        let p = b([0., 0., 0., 4., 1., 1.]);
        let q = b([1., 0., 0., 2., 5., 1.]);
        assert_eq!(enclosing_box(&p, &q), b([0., 0., 0., 4., 5., 1.]));
    }

    #[test]
    fn center_distance_examples() {
        let a = b([0., 0., 0., 2., 2., 2.]);
        assert_eq!(center_distance_sq(&a, &a), 0.0);
        let c = b([1., 1., 1., 3., 3., 3.]);
        assert_eq!(center_distance_sq(&a, &c), 3.0);
        let p = Box3::from_center_size([0., 0., 0.], [1., 1., 1.]).unwrap();
        let q = Box3::from_center_size([0., 3., 4.], [1., 1., 1.]).unwrap();
        assert_eq!(center_distance_sq(&p, &q), 25.0);
    }

    #[test]
    fn aspect_examples() {
        let gt = Box3::from_center_size([0.; 3], [2., 2., 2.]).unwrap();
        assert_eq!(aspect_term(&gt, &gt), 0.0);
        let scaled = Box3::from_center_size([3., 1., 0.], [4., 4., 4.]).unwrap();
        assert_eq!(aspect_term(&scaled, &gt), 0.0);
        // d = 4 on the slice axis, h = w = 2
        let pred = Box3::from_center_size([0.; 3], [4., 2., 2.]).unwrap();
        let v = aspect_term(&pred, &gt);
        let expected = ASPECT_SCALE
            * ((1f64.atan() - 0.5f64.atan()).powi(2) + (2f64.atan() - 1f64.atan()).powi(2));
        assert_eq!(v, expected);
        assert!((v - 0.0839).abs() < 1e-4, "{v}");
    }

    #[test]
    fn physical_volume() {
        let meta = VolumeMeta::new([32, 512, 512], [5.0, 0.42, 0.42]).unwrap();
        let one = b([0., 0., 0., 2., 10., 10.]);
        let cm3 = meta.physical_volume_cm3(&one);
        assert!((cm3 - 2.0 * 100.0 * 5.0 * 0.42 * 0.42 / 1000.0).abs() < 1e-15);
        assert!(VolumeMeta::new([0, 1, 1], [1.; 3]).is_err());
        assert!(VolumeMeta::new([1, 1, 1], [1., 0., 1.]).is_err());
    }

    #[test]
    fn serde_rejects_bad_corners() {
        let ok: Box3 = serde_json::from_str("[0,0,0,1,2,3]").unwrap();
        assert_eq!(ok.extents(), [1., 2., 3.]);
        assert!(serde_json::from_str::<Box3>("[0,0,0,0,2,3]").is_err());
    }
}
