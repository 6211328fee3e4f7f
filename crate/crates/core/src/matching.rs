//! ATSS anchor assignment and hard-negative selection.
//!
//! For each ground-truth box the `top_k` anchors nearest by center distance
//! are collected on every pyramid level. Their IoUs with the box set an
//! adaptive threshold `mean + std` (population standard deviation); candidates
//! at or above it whose center lies strictly inside the box become positives.
//! An anchor claimed by several boxes goes to the one with the highest IoU,
//! ties to the lower box index. Everything else is negative.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::Serialize;
use thiserror::Error;

use crate::anchors::AnchorGrid;
use crate::geometry::{self, Box3};

pub const DEFAULT_TOP_K: usize = 9;
pub const DEFAULT_NEGATIVE_RATIO: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatchError {
    #[error("top_k must be >= 1")]
    ZeroTopK,
    #[error("anchor grid is empty")]
    NoAnchors,
    #[error("got {scores} scores for {anchors} anchors")]
    ScoreLength { scores: usize, anchors: usize },
    #[error("negative ratio must be finite and > 0, got {0}")]
    BadRatio(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    /// Excluded from both classes. Not produced by [`atss_match`]; available
    /// to callers that carve out an ignore band.
    Ignored,
}

/// Diagnostics for one ground-truth box.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GtMatchStats {
    pub candidates: Vec<usize>,
    pub iou_mean: f64,
    pub iou_std: f64,
    /// `iou_mean + iou_std`.
    pub threshold: f64,
    /// Positives kept after resolving anchors shared with other boxes.
    pub positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    pub labels: Vec<AnchorLabel>,
    pub gt_stats: Vec<GtMatchStats>,
}

impl MatchResult {
    /// `(anchor index, gt index)` for every positive anchor, in anchor order.
    pub fn positives(&self) -> Vec<(usize, usize)> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                AnchorLabel::Positive(g) => Some((i, *g)),
                _ => None,
            })
            .collect()
    }

    pub fn num_positive(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Positive(_)))
            .count()
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == AnchorLabel::Negative)
            .map(|(i, _)| i)
    }

    /// Ground-truth indices that ended with no positive anchor.
    pub fn unmatched_gts(&self) -> Vec<usize> {
        self.gt_stats
            .iter()
            .enumerate()
            .filter(|(_, s)| s.positives == 0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Max-heap entry ordered by `(distance, index)`.
#[derive(Debug, PartialEq)]
struct Near(f64, usize);

impl Eq for Near {}

impl PartialOrd for Near {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Near {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

fn dist_sq(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Candidate anchors for `gt`: the `top_k` nearest per level, ties broken by
/// anchor index, returned in ascending index order.
pub fn atss_candidates(grid: &AnchorGrid, gt: &Box3, top_k: usize) -> Vec<usize> {
    let center = gt.center();
    let mut candidates = Vec::new();
    for level in grid.levels() {
        let mut heap: BinaryHeap<Near> = BinaryHeap::with_capacity(top_k + 1);
        let k = level.shapes.len();
        for local_cell in 0..level.len() / k {
            let first = level.offset + local_cell * k;
            let d = dist_sq(level.anchor_center(local_cell * k), center);
            for f in 0..k {
                let entry = Near(d, first + f);
                if heap.len() < top_k {
                    heap.push(entry);
                } else if entry < *heap.peek().expect("heap is full") {
                    heap.pop();
                    heap.push(entry);
                }
            }
        }
        candidates.extend(heap.into_iter().map(|n| n.1));
    }
    candidates.sort_unstable();
    candidates
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn atss_match(grid: &AnchorGrid, gts: &[Box3], top_k: usize) -> Result<MatchResult, MatchError> {
    if top_k == 0 {
        return Err(MatchError::ZeroTopK);
    }
    if grid.is_empty() {
        return Err(MatchError::NoAnchors);
    }

    // best (iou, gt) claim per anchor
    let mut claims: Vec<Option<(f64, usize)>> = vec![None; grid.len()];
    let mut gt_stats = Vec::with_capacity(gts.len());

    for (gi, gt) in gts.iter().enumerate() {
        let candidates = atss_candidates(grid, gt, top_k);
        let anchors: Vec<_> = candidates
            .iter()
            .map(|&i| grid.anchor(i).expect("candidate index in range"))
            .collect();
        let ious: Vec<f64> = anchors.iter().map(|a| geometry::iou(&a.bbox, gt)).collect();
        let (iou_mean, iou_std) = mean_std(&ious);
        let threshold = iou_mean + iou_std;

        for (a, &iou) in anchors.iter().zip(&ious) {
            if iou >= threshold && gt.strictly_contains_point(a.center) {
                let claim = &mut claims[a.index];
                match claim {
                    Some((best, _)) if *best >= iou => {}
                    _ => *claim = Some((iou, gi)),
                }
            }
        }
        gt_stats.push(GtMatchStats {
            candidates,
            iou_mean,
            iou_std,
            threshold,
            positives: 0,
        });
    }

    let labels: Vec<AnchorLabel> = claims
        .iter()
        .map(|c| match c {
            Some((_, g)) => AnchorLabel::Positive(*g),
            None => AnchorLabel::Negative,
        })
        .collect();
    for label in &labels {
        if let AnchorLabel::Positive(g) = label {
            gt_stats[*g].positives += 1;
        }
    }
    Ok(MatchResult { labels, gt_stats })
}

/// Number of hard negatives to draw for `positives` positive anchors.
pub fn hard_negative_budget(positives: usize, available: usize, ratio: f64, cap: usize) -> usize {
    let wanted = if positives == 0 {
        cap
    } else {
        ((ratio * positives as f64).floor() as usize).min(cap)
    };
    wanted.min(available)
}

/// Highest-scoring negative anchors, `min(cap, ratio * positives, available)`
/// of them (just `min(cap, available)` for a scan without positives). Ties go
/// to the lower anchor index; the result is ordered by descending score.
pub fn sample_hard_negatives(
    result: &MatchResult,
    scores: &[f64],
    ratio: f64,
    cap: usize,
) -> Result<Vec<usize>, MatchError> {
    if scores.len() != result.labels.len() {
        return Err(MatchError::ScoreLength {
            scores: scores.len(),
            anchors: result.labels.len(),
        });
    }
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(MatchError::BadRatio(ratio));
    }
    let mut negatives: Vec<usize> = result.negatives().collect();
    let budget = hard_negative_budget(result.num_positive(), negatives.len(), ratio, cap);
    let by_score = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if budget < negatives.len() && budget > 0 {
        negatives.select_nth_unstable_by(budget - 1, by_score);
    }
    negatives.truncate(budget);
    negatives.sort_unstable_by(by_score);
    Ok(negatives)
}
