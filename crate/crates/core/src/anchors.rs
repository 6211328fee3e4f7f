//! Anisotropic feature-pyramid anchor grids and anchor-family fitting.
//!
//! Levels are numbered `P0..=P6`. The in-slice axes (`y`, `x`) are downsampled
//! by 2 at every transition, the slice axis (`z`) only at `P3 -> P4` and
//! `P4 -> P5`, so slice-thick volumes keep their depth resolution through the
//! fine levels. Detection uses `P2..=P6`.
//!
//! Anchor shapes are `(d, h, w)` in input voxels. A family is specified once for
//! the finest detection level and, with [`FamilyScaling::Rescale`], multiplied
//! per axis by the stride ratio for coarser levels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Box3, VolumeMeta};

pub const MAX_LEVEL: u8 = 6;
pub const DETECTION_LEVELS: std::ops::RangeInclusive<u8> = 2..=6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnchorError {
    #[error("volume too small: level P{level} has an empty feature map on axis {axis} (size {size}, stride {stride})")]
    VolumeTooSmall {
        level: u8,
        axis: usize,
        size: usize,
        stride: usize,
    },
    #[error("no anchor family configured for level P{level}")]
    ConfigMissing { level: u8 },
    #[error("invalid stride schedule: {0}")]
    BadSchedule(String),
    #[error("invalid anchor shape {shape:?}: all entries must be finite and > 0")]
    BadShape { shape: [f64; 3] },
    #[error("need at least k = {k} boxes to fit anchors, got {n}")]
    TooFewBoxes { k: usize, n: usize },
    #[error("cannot seed {k} distinct clusters: only {distinct} distinct box shapes")]
    DegenerateCluster { k: usize, distinct: usize },
}

/// Per-transition downsampling factor from `P(level)` to `P(level + 1)`.
pub fn transition_factor(level: u8) -> [usize; 3] {
    let depth = if level == 3 || level == 4 { 2 } else { 1 };
    [depth, 2, 2]
}

/// Cumulative stride of `P(level)` relative to the input volume.
pub fn cumulative_stride(level: u8) -> [usize; 3] {
    (0..level).fold([1, 1, 1], |acc, l| {
        let f = transition_factor(l);
        [acc[0] * f[0], acc[1] * f[1], acc[2] * f[2]]
    })
}

/// Feature-map shapes of `P0..=P6`, each the ceiling of the previous shape over
/// the transition factor.
pub fn pyramid_shapes(volume_shape: [usize; 3]) -> Vec<[usize; 3]> {
    let mut shapes = vec![volume_shape];
    for level in 0..MAX_LEVEL {
        let prev = shapes[level as usize];
        let f = transition_factor(level);
        shapes.push(std::array::from_fn(|i| prev[i].div_ceil(f[i])));
    }
    shapes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub level: u8,
    /// Cumulative stride `(z, y, x)` in input voxels.
    pub stride: [usize; 3],
    /// Anchor shapes `(d, h, w)` in input voxels.
    #[serde(default)]
    pub anchor_shapes: Vec<[f64; 3]>,
}

impl LevelSpec {
    pub fn feature_shape(&self, volume_shape: [usize; 3]) -> [usize; 3] {
        std::array::from_fn(|i| volume_shape[i].div_ceil(self.stride[i]))
    }
}

/// The detection levels `P2..=P6` with their cumulative strides and no anchor
/// shapes attached.
pub fn default_stride_schedule(volume: &VolumeMeta) -> Result<Vec<LevelSpec>, AnchorError> {
    let schedule: Vec<LevelSpec> = DETECTION_LEVELS
        .map(|level| LevelSpec {
            level,
            stride: cumulative_stride(level),
            anchor_shapes: Vec::new(),
        })
        .collect();
    check_schedule(&schedule, volume)?;
    Ok(schedule)
}

fn check_schedule(schedule: &[LevelSpec], volume: &VolumeMeta) -> Result<(), AnchorError> {
    if schedule.is_empty() {
        return Err(AnchorError::BadSchedule("no levels".into()));
    }
    for pair in schedule.windows(2) {
        if pair[1].level <= pair[0].level {
            return Err(AnchorError::BadSchedule(format!(
                "levels must be strictly increasing, got P{} after P{}",
                pair[1].level, pair[0].level
            )));
        }
        if (0..3).any(|i| pair[1].stride[i] < pair[0].stride[i]) {
            return Err(AnchorError::BadSchedule(format!(
                "stride of P{} decreases relative to P{}",
                pair[1].level, pair[0].level
            )));
        }
    }
    let shape = volume.shape();
    for spec in schedule {
        if spec.level > MAX_LEVEL {
            return Err(AnchorError::BadSchedule(format!("unknown level P{}", spec.level)));
        }
        for axis in 0..3 {
            let stride = spec.stride[axis];
            if stride == 0 {
                return Err(AnchorError::BadSchedule(format!("zero stride at P{}", spec.level)));
            }
            if shape[axis] / stride == 0 {
                return Err(AnchorError::VolumeTooSmall {
                    level: spec.level,
                    axis,
                    size: shape[axis],
                    stride,
                });
            }
        }
        for shape in &spec.anchor_shapes {
            check_shape(*shape)?;
        }
    }
    Ok(())
}

fn check_shape(shape: [f64; 3]) -> Result<(), AnchorError> {
    if shape.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(AnchorError::BadShape { shape })
    }
}

/// How one anchor family is shared across pyramid levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyScaling {
    /// Multiply the family by each level's stride over the first level's stride.
    #[default]
    Rescale,
    /// Use the family unchanged on every level.
    Shared,
}

/// Attaches `family` (shapes for the first level of `schedule`) to every level.
pub fn apply_family(
    schedule: &[LevelSpec],
    family: &[[f64; 3]],
    scaling: FamilyScaling,
) -> Result<Vec<LevelSpec>, AnchorError> {
    for shape in family {
        check_shape(*shape)?;
    }
    let Some(base) = schedule.first().map(|s| s.stride) else {
        return Err(AnchorError::BadSchedule("no levels".into()));
    };
    Ok(schedule
        .iter()
        .map(|spec| {
            let anchor_shapes = family
                .iter()
                .map(|shape| match scaling {
                    FamilyScaling::Shared => *shape,
                    FamilyScaling::Rescale => std::array::from_fn(|i| {
                        shape[i] * spec.stride[i] as f64 / base[i] as f64
                    }),
                })
                .collect();
            LevelSpec {
                level: spec.level,
                stride: spec.stride,
                anchor_shapes,
            }
        })
        .collect())
}

/// On-disk anchor configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    #[serde(default)]
    pub scaling: FamilyScaling,
    /// Anchor shapes `(d, h, w)` in input voxels at the first level.
    #[serde(default)]
    pub family: Vec<[f64; 3]>,
    /// Explicit levels; the default pyramid schedule when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<LevelStride>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelStride {
    pub level: u8,
    pub stride: [usize; 3],
}

impl AnchorConfig {
    pub fn new(family: Vec<[f64; 3]>) -> Self {
        Self {
            scaling: FamilyScaling::default(),
            family,
            levels: None,
        }
    }

    /// The stride schedule with the family attached.
    pub fn schedule(&self, volume: &VolumeMeta) -> Result<Vec<LevelSpec>, AnchorError> {
        let bare = match &self.levels {
            Some(levels) => {
                let specs: Vec<LevelSpec> = levels
                    .iter()
                    .map(|l| LevelSpec {
                        level: l.level,
                        stride: l.stride,
                        anchor_shapes: Vec::new(),
                    })
                    .collect();
                check_schedule(&specs, volume)?;
                specs
            }
            None => default_stride_schedule(volume)?,
        };
        if self.family.is_empty() {
            return Err(AnchorError::ConfigMissing { level: bare[0].level });
        }
        apply_family(&bare, &self.family, self.scaling)
    }
}

/// One laid-out level of an [`AnchorGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridLevel {
    pub level: u8,
    pub stride: [usize; 3],
    pub feature_shape: [usize; 3],
    pub shapes: Vec<[f64; 3]>,
    /// Global index of this level's first anchor.
    pub offset: usize,
    volume_shape: [usize; 3],
}

impl GridLevel {
    pub fn len(&self) -> usize {
        self.shapes.len() * self.feature_shape.iter().product::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Center of lattice cell `cell`: the middle of the cell clipped to the volume.
    pub fn cell_center(&self, cell: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|i| {
            let lo = cell[i] * self.stride[i];
            let hi = ((cell[i] + 1) * self.stride[i]).min(self.volume_shape[i]);
            0.5 * (lo + hi) as f64
        })
    }

    /// Center of the anchor at within-level index `local`.
    pub fn anchor_center(&self, local: usize) -> [f64; 3] {
        self.cell_center(self.decode(local).0)
    }

    /// Decodes a within-level index into `(cell, family index)`.
    fn decode(&self, local: usize) -> ([usize; 3], usize) {
        let k = self.shapes.len();
        let [_, ny, nx] = self.feature_shape;
        let family = local % k;
        let flat = local / k;
        let x = flat % nx;
        let y = (flat / nx) % ny;
        let z = flat / (nx * ny);
        ([z, y, x], family)
    }
}

/// A single anchor with its provenance in the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub index: usize,
    pub level_index: usize,
    pub cell: [usize; 3],
    pub family: usize,
    pub center: [f64; 3],
    pub bbox: Box3,
}

/// Immutable anchor lattice; anchors are materialized on demand in the
/// order level, then `z`, `y`, `x` cell, then family member.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    levels: Vec<GridLevel>,
    len: usize,
}

impl AnchorGrid {
    pub fn levels(&self) -> &[GridLevel] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn level_of(&self, index: usize) -> Option<usize> {
        if index >= self.len {
            return None;
        }
        Some(self.levels.partition_point(|l| l.offset + l.len() <= index))
    }

    pub fn anchor(&self, index: usize) -> Option<Anchor> {
        let level_index = self.level_of(index)?;
        Some(self.anchor_in_level(level_index, index))
    }

    fn anchor_in_level(&self, level_index: usize, index: usize) -> Anchor {
        let level = &self.levels[level_index];
        let (cell, family) = level.decode(index - level.offset);
        let center = level.cell_center(cell);
        let bbox = Box3::from_center_size(center, level.shapes[family])
            .expect("anchor shapes are validated positive");
        Anchor {
            index,
            level_index,
            cell,
            family,
            center,
            bbox,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Anchor> + '_ {
        self.levels.iter().enumerate().flat_map(move |(li, level)| {
            level.range().map(move |i| self.anchor_in_level(li, i))
        })
    }

    pub fn iter_level(&self, level_index: usize) -> impl Iterator<Item = Anchor> + '_ {
        self.levels[level_index]
            .range()
            .map(move |i| self.anchor_in_level(level_index, i))
    }

    pub fn boxes(&self) -> Vec<Box3> {
        self.iter().map(|a| a.bbox).collect()
    }
}

/// Lays the schedule's anchor shapes over every level's feature lattice.
pub fn generate_anchors(schedule: &[LevelSpec], volume: &VolumeMeta) -> Result<AnchorGrid, AnchorError> {
    check_schedule(schedule, volume)?;
    let mut levels = Vec::with_capacity(schedule.len());
    let mut offset = 0;
    for spec in schedule {
        if spec.anchor_shapes.is_empty() {
            return Err(AnchorError::ConfigMissing { level: spec.level });
        }
        let level = GridLevel {
            level: spec.level,
            stride: spec.stride,
            feature_shape: spec.feature_shape(volume.shape()),
            shapes: spec.anchor_shapes.clone(),
            offset,
            volume_shape: volume.shape(),
        };
        offset += level.len();
        levels.push(level);
    }
    Ok(AnchorGrid { levels, len: offset })
}

/// IoU of two shapes placed on a common center.
pub fn shape_iou(a: [f64; 3], b: [f64; 3]) -> f64 {
    let inter: f64 = (0..3).map(|i| a[i].min(b[i])).product();
    let va: f64 = a.iter().product();
    let vb: f64 = b.iter().product();
    inter / (va + vb - inter)
}

/// Mean over `shapes` of the best [`shape_iou`] against any anchor.
pub fn mean_best_iou(shapes: &[[f64; 3]], anchors: &[[f64; 3]]) -> f64 {
    if shapes.is_empty() {
        return 0.0;
    }
    shapes
        .iter()
        .map(|s| best_match(*s, anchors).1)
        .sum::<f64>()
        / shapes.len() as f64
}

fn best_match(shape: [f64; 3], anchors: &[[f64; 3]]) -> (usize, f64) {
    anchors
        .iter()
        .enumerate()
        .map(|(i, a)| (i, shape_iou(shape, *a)))
        .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FitConfig {
    pub k: usize,
    pub iters: usize,
    pub seed: u64,
}

impl FitConfig {
    pub fn new(k: usize, iters: usize) -> Self {
        Self { k, iters, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorFit {
    /// Fitted shapes `(d, h, w)`, sorted by ascending volume.
    pub shapes: Vec<[f64; 3]>,
    pub mean_best_iou: f64,
    /// Objective after initialization and after every accepted iteration;
    /// non-decreasing.
    pub history: Vec<f64>,
    /// Empty clusters re-seeded from the worst-covered box.
    pub reseeds: usize,
}

/// IoU-distance k-means over box shapes.
///
/// Initialization is k-means++ driven by a seeded generator with `1 - IoU`
/// as the distance. An iteration assigns each shape to its best anchor and
/// moves every anchor to the per-axis mean of its members; a cluster that
/// loses all members is re-seeded at the worst-covered shape. Iterations that
/// would lower the mean best-IoU are rejected and end the fit.
pub fn fit_anchors(boxes: &[Box3], config: FitConfig) -> Result<AnchorFit, AnchorError> {
    let FitConfig { k, iters, seed } = config;
    if k == 0 || boxes.len() < k {
        return Err(AnchorError::TooFewBoxes { k, n: boxes.len() });
    }
    let shapes: Vec<[f64; 3]> = boxes.iter().map(Box3::extents).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers = seed_plus_plus(&shapes, k, &mut rng)?;
    let mut objective = mean_best_iou(&shapes, &centers);
    let mut history = vec![objective];
    let mut reseeds = 0;

    for _ in 0..iters {
        let assignment: Vec<usize> = shapes.iter().map(|s| best_match(*s, &centers).0).collect();
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (s, &c) in shapes.iter().zip(&assignment) {
            counts[c] += 1;
            for i in 0..3 {
                sums[c][i] += s[i];
            }
        }
        let mut next = centers.clone();
        for c in 0..k {
            if counts[c] > 0 {
                next[c] = sums[c].map(|v| v / counts[c] as f64);
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let worst = shapes
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (i, best_match(*s, &next).1))
                    .fold((0, f64::INFINITY), |w, cur| if cur.1 < w.1 { cur } else { w });
                if worst.1 < 1.0 {
                    next[c] = shapes[worst.0];
                    reseeds += 1;
                }
            }
        }
        let candidate = mean_best_iou(&shapes, &next);
        if candidate < objective || next == centers {
            break;
        }
        centers = next;
        objective = candidate;
        history.push(objective);
    }

    centers.sort_by(|a, b| {
        let (va, vb) = (a.iter().product::<f64>(), b.iter().product::<f64>());
        va.total_cmp(&vb).then_with(|| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal))
    });
    Ok(AnchorFit {
        shapes: centers,
        mean_best_iou: objective,
        history,
        reseeds,
    })
}

fn seed_plus_plus(shapes: &[[f64; 3]], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<[f64; 3]>, AnchorError> {
    let mut centers = vec![shapes[rng.random_range(0..shapes.len())]];
    while centers.len() < k {
        let weights: Vec<f64> = shapes
            .iter()
            .map(|s| (1.0 - best_match(*s, &centers).1).max(0.0).powi(2))
            .collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            let mut distinct: Vec<[f64; 3]> = Vec::new();
            for s in shapes {
                if !distinct.contains(s) {
                    distinct.push(*s);
                }
            }
            return Err(AnchorError::DegenerateCluster {
                k,
                distinct: distinct.len(),
            });
        }
        let mut target = rng.random::<f64>() * total;
        let mut chosen = weights.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if *w > 0.0 {
                chosen = i;
                if target < *w {
                    break;
                }
                target -= w;
            }
        }
        centers.push(shapes[chosen]);
    }
    Ok(centers)
}
