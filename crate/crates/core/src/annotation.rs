//! Label maps to boxes, and seeded box corruptions that model rough
//! annotation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, Box3, Spacing, VolumeMeta};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnnotationError {
    #[error("label map has {got} voxels, shape {shape:?} needs {expected}")]
    ShapeMismatch {
        shape: [usize; 3],
        expected: usize,
        got: usize,
    },
    #[error("noise magnitude must lie in [0, 1), got {0}")]
    BadMagnitude(f64),
    #[error("drop probability must lie in [0, 1], got {0}")]
    BadProbability(f64),
    #[error("unknown noise mode '{0}' (expected shrink, enlarge, shift or drop)")]
    UnknownMode(String),
}

/// Dense voxel labels in z-major order; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    meta: VolumeMeta,
    data: Vec<u16>,
}

impl LabelMap {
    pub fn new(meta: VolumeMeta, data: Vec<u16>) -> Result<Self, AnnotationError> {
        if data.len() != meta.voxel_count() {
            return Err(AnnotationError::ShapeMismatch {
                shape: meta.shape(),
                expected: meta.voxel_count(),
                got: data.len(),
            });
        }
        Ok(Self { meta, data })
    }

    pub fn zeros(meta: VolumeMeta) -> Self {
        let data = vec![0; meta.voxel_count()];
        Self { meta, data }
    }

    pub fn meta(&self) -> &VolumeMeta {
        &self.meta
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u16> {
        self.data
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        let [_, h, w] = self.meta.shape();
        (z * h + y) * w + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u16 {
        self.data[self.index(z, y, x)]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: u16) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    /// Face neighbours only.
    #[serde(rename = "6")]
    Six,
    /// Face, edge and corner neighbours.
    #[default]
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Option<Self> {
        match n {
            6 => Some(Self::Six),
            26 => Some(Self::TwentySix),
            _ => None,
        }
    }

    /// Neighbour offsets that precede a voxel in raster order.
    fn backward_offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let d = [dz, dy, dx];
                    if d >= [0, 0, 0] {
                        continue;
                    }
                    let manhattan: isize = d.iter().map(|v| v.abs()).sum();
                    if self == Self::TwentySix || manhattan == 1 {
                        out.push(d);
                    }
                }
            }
        }
        out
    }
}

/// One connected component: its tight box, voxel count and label value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Component {
    pub bbox: Box3,
    pub voxels: usize,
    pub label: u16,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Connected components of equal nonzero labels, ordered by their first voxel
/// in raster order.
pub fn mask_to_boxes(map: &LabelMap, connectivity: Connectivity) -> Vec<Component> {
    let [d, h, w] = map.meta.shape();
    let offsets = connectivity.backward_offsets();
    let n = map.data.len();
    let mut parent: Vec<usize> = (0..n).collect();

    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = map.index(z, y, x);
                let v = map.data[i];
                if v == 0 {
                    continue;
                }
                for o in &offsets {
                    let (nz, ny, nx) = (z as isize + o[0], y as isize + o[1], x as isize + o[2]);
                    if nz < 0 || ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = map.index(nz as usize, ny as usize, nx as usize);
                    if map.data[j] != v {
                        continue;
                    }
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        // keep the earliest voxel as root
                        let (lo, hi) = if ri < rj { (ri, rj) } else { (rj, ri) };
                        parent[hi] = lo;
                    }
                }
            }
        }
    }

    // root voxel -> component slot
    let mut slot = vec![usize::MAX; n];
    let mut acc: Vec<([usize; 3], [usize; 3], usize, u16)> = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = map.index(z, y, x);
                if map.data[i] == 0 {
                    continue;
                }
                let r = find(&mut parent, i);
                if slot[r] == usize::MAX {
                    slot[r] = acc.len();
                    acc.push(([z, y, x], [z, y, x], 0, map.data[i]));
                }
                let c = &mut acc[slot[r]];
                let p = [z, y, x];
                for a in 0..3 {
                    c.0[a] = c.0[a].min(p[a]);
                    c.1[a] = c.1[a].max(p[a]);
                }
                c.2 += 1;
            }
        }
    }

    acc.into_iter()
        .map(|(lo, hi, voxels, label)| Component {
            bbox: Box3::from_voxel_range(lo, [hi[0] + 1, hi[1] + 1, hi[2] + 1])
                .expect("component range is non-empty"),
            voxels,
            label,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    Shrink,
    Enlarge,
    Shift,
    Drop,
}

impl std::str::FromStr for NoiseMode {
    type Err = AnnotationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shrink" => Ok(Self::Shrink),
            "enlarge" => Ok(Self::Enlarge),
            "shift" => Ok(Self::Shift),
            "drop" => Ok(Self::Drop),
            other => Err(AnnotationError::UnknownMode(other.to_string())),
        }
    }
}

pub const DEFAULT_DROP_UNDER_1CM3: f64 = 0.2;
pub const DEFAULT_DROP_UNDER_10CM3: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseSpec {
    mode: NoiseMode,
    magnitude: f64,
    /// Removal probability for boxes under 1 cm³ and for boxes in [1, 10) cm³.
    drop_rates: [f64; 2],
    seed: u64,
}

impl NoiseSpec {
    pub fn new(mode: NoiseMode, magnitude: f64, seed: u64) -> Result<Self, AnnotationError> {
        if !(0.0..1.0).contains(&magnitude) {
            return Err(AnnotationError::BadMagnitude(magnitude));
        }
        Ok(Self {
            mode,
            magnitude,
            drop_rates: [DEFAULT_DROP_UNDER_1CM3, DEFAULT_DROP_UNDER_10CM3],
            seed,
        })
    }

    pub fn with_drop_rates(mut self, under_1: f64, under_10: f64) -> Result<Self, AnnotationError> {
        for p in [under_1, under_10] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AnnotationError::BadProbability(p));
            }
        }
        self.drop_rates = [under_1, under_10];
        Ok(self)
    }

    pub fn mode(&self) -> NoiseMode {
        self.mode
    }

    pub fn magnitude(&self) -> f64 {
        self.magnitude
    }

    pub fn drop_rates(&self) -> [f64; 2] {
        self.drop_rates
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Spec for the `index`-th scan of a batch: seed + index.
    pub fn for_scan(&self, index: usize) -> Self {
        Self {
            seed: self.seed.wrapping_add(index as u64),
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseOutcome {
    /// Corrupted boxes of the kept inputs, in input order.
    pub boxes: Vec<Box3>,
    /// Input index of each output box.
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
    /// Mean IoU of each output box with its original; `None` without outputs.
    pub mean_iou: Option<f64>,
    /// Axes held at the minimum extent instead of shrinking further.
    pub clamped: usize,
}

/// Smallest extent noise may produce: one voxel, or the original extent if
/// that is already below one.
fn min_extent(original: f64) -> f64 {
    original.min(1.0)
}

/// Shift resolution. Offsets on this grid add to voxel-aligned coordinates
/// without rounding, so shifted extents stay bit-exact.
const SHIFT_QUANTUM: f64 = 1.0 / (1u64 << 20) as f64;

fn snap(t: f64) -> f64 {
    (t / SHIFT_QUANTUM).round() * SHIFT_QUANTUM
}

/// Applies `spec` to `boxes`. Shrink and enlarge rescale each axis extent by
/// an independent factor drawn from `[1 - m, 1]` or `[1, 1 + m]` about the box
/// center; shift moves the center along each axis by a signed fraction of at
/// most `m` of that extent. Drop removes small boxes by physical volume.
pub fn corrupt_boxes(boxes: &[Box3], spacing: &Spacing, spec: &NoiseSpec) -> NoiseOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.magnitude;
    let mut out = NoiseOutcome {
        boxes: Vec::with_capacity(boxes.len()),
        kept: Vec::with_capacity(boxes.len()),
        dropped: Vec::new(),
        mean_iou: None,
        clamped: 0,
    };

    for (i, b) in boxes.iter().enumerate() {
        let (lo, hi) = (b.min(), b.max());
        let mut nlo = lo;
        let mut nhi = hi;
        match spec.mode {
            NoiseMode::Shrink => {
                for a in 0..3 {
                    let s = hi[a] - lo[a];
                    let f: f64 = 1.0 - m * rng.random::<f64>();
                    let mut target = s * f;
                    if target < min_extent(s) {
                        target = min_extent(s);
                        out.clamped += 1;
                    }
                    let delta = (s - target) / 2.0;
                    nlo[a] = lo[a] + delta;
                    nhi[a] = hi[a] - delta;
                }
            }
            NoiseMode::Enlarge => {
                for a in 0..3 {
                    let s = hi[a] - lo[a];
                    let delta = s * m * rng.random::<f64>() / 2.0;
                    nlo[a] = lo[a] - delta;
                    nhi[a] = hi[a] + delta;
                }
            }
            NoiseMode::Shift => {
                for a in 0..3 {
                    let s = hi[a] - lo[a];
                    let t = snap(s * m * rng.random_range(-1.0..=1.0));
                    nlo[a] = lo[a] + t;
                    nhi[a] = hi[a] + t;
                }
            }
            NoiseMode::Drop => {
                let u: f64 = rng.random();
                let cm3 = spacing.volume_cm3(b);
                let p = if cm3 < 1.0 {
                    spec.drop_rates[0]
                } else if cm3 < 10.0 {
                    spec.drop_rates[1]
                } else {
                    0.0
                };
                if u < p {
                    out.dropped.push(i);
                    continue;
                }
            }
        }
        let nb = Box3::new(nlo, nhi).unwrap_or(*b);
        out.boxes.push(nb);
        out.kept.push(i);
    }

    if !out.boxes.is_empty() {
        let total: f64 = out
            .kept
            .iter()
            .zip(&out.boxes)
            .map(|(&i, nb)| geometry::iou(&boxes[i], nb))
            .sum();
        out.mean_iou = Some(total / out.boxes.len() as f64);
    }
    out
}
