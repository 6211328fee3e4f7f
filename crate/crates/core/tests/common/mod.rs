//! Independent brute-force references shared by the integration tests.
#![allow(dead_code)]

use std::collections::VecDeque;

use rand::Rng;
use voxdet::anchors::AnchorGrid;
use voxdet::annotation::{Connectivity, LabelMap};
use voxdet::geometry::{self, Box3};
use voxdet::matching::AnchorLabel;
use voxdet::nms::Detection;

/// Random integer-cornered box inside `[0, n)^3`.
pub fn int_box(rng: &mut impl Rng, n: i64) -> Box3 {
    let mut c = [0.0; 6];
    for a in 0..3 {
        let lo = rng.random_range(0..n);
        let hi = rng.random_range(lo + 1..=n);
        c[a] = lo as f64;
        c[a + 3] = hi as f64;
    }
    Box3::from_corners(c).unwrap()
}

/// IoU by counting the voxels of each box and of their overlap.
pub fn voxel_iou(a: &Box3, b: &Box3) -> f64 {
    let e = geometry::enclosing_box(a, b);
    let (lo, hi) = (e.min(), e.max());
    let inside = |bx: &Box3, p: [f64; 3]| (0..3).all(|i| bx.min()[i] <= p[i] && p[i] < bx.max()[i]);
    let (mut na, mut nb, mut ni) = (0u64, 0u64, 0u64);
    for z in lo[0] as i64..hi[0] as i64 {
        for y in lo[1] as i64..hi[1] as i64 {
            for x in lo[2] as i64..hi[2] as i64 {
                let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                let (ia, ib) = (inside(a, p), inside(b, p));
                na += ia as u64;
                nb += ib as u64;
                ni += (ia && ib) as u64;
            }
        }
    }
    if ni == 0 {
        0.0
    } else {
        ni as f64 / (na + nb - ni) as f64
    }
}

/// Voxel-counting IoU for integer-cornered boxes, scanning the enclosing box
/// with integer bounds.
pub fn voxel_iou_int(a: &Box3, b: &Box3) -> f64 {
    let ia = a.corners().map(|v| v as i64);
    let ib = b.corners().map(|v| v as i64);
    let inside = |c: &[i64; 6], z: i64, y: i64, x: i64| {
        c[0] <= z && z < c[3] && c[1] <= y && y < c[4] && c[2] <= x && x < c[5]
    };
    let (mut na, mut nb, mut ni) = (0u64, 0u64, 0u64);
    for z in ia[0].min(ib[0])..ia[3].max(ib[3]) {
        for y in ia[1].min(ib[1])..ia[4].max(ib[4]) {
            for x in ia[2].min(ib[2])..ia[5].max(ib[5]) {
                let (pa, pb) = (inside(&ia, z, y, x), inside(&ib, z, y, x));
                na += pa as u64;
                nb += pb as u64;
                ni += (pa && pb) as u64;
            }
        }
    }
    if ni == 0 {
        0.0
    } else {
        ni as f64 / (na + nb - ni) as f64
    }
}

/// Greedy NMS that suppresses forward from each kept box.
pub fn brute_nms(dets: &[Detection], t: f64, max_out: usize) -> Vec<usize> {
    let n = dets.len();
    let mut order: Vec<usize> = (0..n).collect();
    // insertion sort: descending score, stable
    for i in 1..n {
        let mut j = i;
        while j > 0 && dets[order[j]].score() > dets[order[j - 1]].score() {
            order.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut alive = vec![true; n];
    let mut kept = Vec::new();
    for (r, &i) in order.iter().enumerate() {
        if !alive[i] {
            continue;
        }
        kept.push(i);
        for &j in &order[r + 1..] {
            if dets[j].label == dets[i].label && geometry::iou(&dets[i].bbox, &dets[j].bbox) > t {
                alive[j] = false;
            }
        }
    }
    kept.truncate(max_out);
    kept
}

/// ATSS by sorting every anchor of every level per box.
pub fn brute_atss(grid: &AnchorGrid, gts: &[Box3], top_k: usize) -> Vec<AnchorLabel> {
    let anchors: Vec<_> = grid.iter().collect();
    let mut best: Vec<Option<(f64, usize)>> = vec![None; anchors.len()];
    for (gi, gt) in gts.iter().enumerate() {
        let c = gt.center();
        let mut cands = Vec::new();
        for li in 0..grid.levels().len() {
            let mut lvl: Vec<(f64, usize)> = anchors
                .iter()
                .filter(|a| a.level_index == li)
                .map(|a| {
                    let d: f64 = (0..3).map(|i| (a.center[i] - c[i]).powi(2)).sum();
                    (d, a.index)
                })
                .collect();
            lvl.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            cands.extend(lvl.iter().take(top_k).map(|p| p.1));
        }
        cands.sort();
        let ious: Vec<f64> = cands.iter().map(|&i| geometry::iou(&anchors[i].bbox, gt)).collect();
        let n = ious.len() as f64;
        let mean = ious.iter().sum::<f64>() / n;
        let std = (ious.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        for (&i, &iou) in cands.iter().zip(&ious) {
            if iou >= mean + std && gt.strictly_contains_point(anchors[i].center) {
                let replace = match best[i] {
                    None => true,
                    Some((b, _)) => iou > b,
                };
                if replace {
                    best[i] = Some((iou, gi));
                }
            }
        }
    }
    best.iter()
        .map(|b| match b {
            Some((_, g)) => AnchorLabel::Positive(*g),
            None => AnchorLabel::Negative,
        })
        .collect()
}

/// Component found by breadth-first flood fill.
#[derive(Debug, Clone, PartialEq)]
pub struct FloodComponent {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
    pub voxels: Vec<[usize; 3]>,
    pub label: u16,
}

pub fn flood_fill(map: &LabelMap, conn: Connectivity) -> Vec<FloodComponent> {
    let [d, h, w] = map.meta().shape();
    let mut seen = vec![false; d * h * w];
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let label = map.get(z, y, x);
                if label == 0 || seen[idx(z, y, x)] {
                    continue;
                }
                seen[idx(z, y, x)] = true;
                let mut queue = VecDeque::from([[z, y, x]]);
                let mut comp = FloodComponent {
                    lo: [z, y, x],
                    hi: [z, y, x],
                    voxels: Vec::new(),
                    label,
                };
                while let Some(p) = queue.pop_front() {
                    comp.voxels.push(p);
                    for a in 0..3 {
                        comp.lo[a] = comp.lo[a].min(p[a]);
                        comp.hi[a] = comp.hi[a].max(p[a]);
                    }
                    for dz in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let steps = dz.abs() + dy.abs() + dx.abs();
                                if steps == 0 || (conn == Connectivity::Six && steps > 1) {
                                    continue;
                                }
                                let q = [p[0] as i64 + dz, p[1] as i64 + dy, p[2] as i64 + dx];
                                if q[0] < 0 || q[1] < 0 || q[2] < 0 {
                                    continue;
                                }
                                let q = [q[0] as usize, q[1] as usize, q[2] as usize];
                                if q[0] >= d || q[1] >= h || q[2] >= w {
                                    continue;
                                }
                                let k = idx(q[0], q[1], q[2]);
                                if !seen[k] && map.get(q[0], q[1], q[2]) == label {
                                    seen[k] = true;
                                    queue.push_back(q);
                                }
                            }
                        }
                    }
                }
                out.push(comp);
            }
        }
    }
    out
}

/// Random sparse label map: seeded blobs grown by random walks.
pub fn random_label_map(rng: &mut impl Rng, shape: [usize; 3], labels: u16, walkers: usize, steps: usize) -> LabelMap {
    let meta = voxdet::geometry::VolumeMeta::new(shape, [1.0; 3]).unwrap();
    let mut map = LabelMap::zeros(meta);
    for _ in 0..walkers {
        let label = rng.random_range(1..=labels);
        let mut p = [0usize; 3];
        for a in 0..3 {
            p[a] = rng.random_range(0..shape[a]);
        }
        for _ in 0..steps {
            map.set(p[0], p[1], p[2], label);
            let a = rng.random_range(0..3);
            if rng.random_bool(0.5) {
                p[a] = (p[a] + 1).min(shape[a] - 1);
            } else {
                p[a] = p[a].saturating_sub(1);
            }
        }
    }
    map
}

/// Reference evaluation of one pooled set of scans, written from the
/// definitions with quadratic loops.
pub struct RefScan {
    pub dets: Vec<(Box3, f64, i64)>,
    pub gts: Vec<(Box3, i64)>,
}

/// Per-scan detection outcome `(score, is_tp, rank in scan)`, ranks by
/// descending score with input order breaking ties.
pub fn ref_match(scan: &RefScan, t: f64) -> Vec<(f64, bool, usize)> {
    let n = scan.dets.len();
    let mut rank: Vec<usize> = (0..n).collect();
    // selection sort
    for i in 0..n {
        let mut best = i;
        for j in i + 1..n {
            let (sj, sb) = (scan.dets[rank[j]].1, scan.dets[rank[best]].1);
            if sj > sb || (sj == sb && rank[j] < rank[best]) {
                best = j;
            }
        }
        rank.swap(i, best);
    }
    let mut taken = vec![false; scan.gts.len()];
    let mut out = Vec::new();
    for (r, &di) in rank.iter().enumerate() {
        let (b, s, l) = scan.dets[di];
        let mut pick: Option<usize> = None;
        for (gi, (g, gl)) in scan.gts.iter().enumerate() {
            if taken[gi] || *gl != l {
                continue;
            }
            let v = geometry::iou(&b, g);
            if v < t {
                continue;
            }
            if pick.is_none_or(|p| v > geometry::iou(&b, &scan.gts[p].0)) {
                pick = Some(gi);
            }
        }
        if let Some(gi) = pick {
            taken[gi] = true;
        }
        out.push((s, pick.is_some(), r));
    }
    out
}

/// Pooled `(score, tp)` list: scans in the given order, stable by score.
pub fn ref_pool(per_scan: &[Vec<(f64, bool, usize)>]) -> Vec<(f64, bool)> {
    let mut all: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (si, s) in per_scan.iter().enumerate() {
        for &(score, tp, r) in s {
            all.push((score, si, r, tp));
        }
    }
    let n = all.len();
    for i in 0..n {
        let mut best = i;
        for j in i + 1..n {
            let (a, b) = (all[j], all[best]);
            if a.0 > b.0 || (a.0 == b.0 && (a.1, a.2) < (b.1, b.2)) {
                best = j;
            }
        }
        all.swap(i, best);
    }
    all.into_iter().map(|(s, _, _, tp)| (s, tp)).collect()
}

/// AP as the sum over true positives of the best precision at any equal or
/// higher recall, divided by the ground-truth count.
pub fn ref_ap(pooled: &[(f64, bool)], n_gt: usize) -> f64 {
    let prec = |k: usize| pooled[..=k].iter().filter(|p| p.1).count() as f64 / (k + 1) as f64;
    let mut ap = 0.0;
    for k in 0..pooled.len() {
        if pooled[k].1 {
            let best = (k..pooled.len()).map(prec).fold(0.0, f64::max);
            ap += best / n_gt as f64;
        }
    }
    ap
}

pub fn ref_ar(per_scan: &[Vec<(f64, bool, usize)>], n_gt: usize, max_det: usize) -> f64 {
    let tp: usize = per_scan
        .iter()
        .map(|s| s.iter().filter(|d| d.2 < max_det && d.1).count())
        .sum();
    tp as f64 / n_gt as f64
}

/// Sensitivity at each FP/scan rate: enumerate every score cut.
pub fn ref_froc(pooled: &[(f64, bool)], n_gt: usize, n_scans: usize, axis: &[f64]) -> Vec<f64> {
    let mut cuts: Vec<f64> = pooled.iter().map(|p| p.0).collect();
    cuts.push(f64::INFINITY);
    axis.iter()
        .map(|&rate| {
            let mut best = 0.0f64;
            for &c in &cuts {
                let fp = pooled.iter().filter(|p| p.0 >= c && !p.1).count();
                let tp = pooled.iter().filter(|p| p.0 >= c && p.1).count();
                if fp as f64 / n_scans as f64 <= rate {
                    best = best.max(tp as f64 / n_gt as f64);
                }
            }
            best
        })
        .collect()
}
