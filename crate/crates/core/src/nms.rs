//! Greedy score-ordered 3D non-maximum suppression.

use serde::Serialize;
use thiserror::Error;

use crate::geometry::{self, Box3};

/// IoU threshold used when none is given. 3D overlaps are small, so this sits
/// far below the usual 2D defaults.
pub const DEFAULT_NMS_IOU: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectionError {
    #[error("detection score {0} outside [0, 1]")]
    BadScore(f64),
    #[error("NMS IoU threshold must lie in (0, 1), got {0}")]
    BadThreshold(f64),
}

/// A scored, labeled box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Detection {
    pub bbox: Box3,
    score: f64,
    pub label: i64,
}

impl Detection {
    pub fn new(bbox: Box3, score: f64, label: i64) -> Result<Self, DetectionError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(DetectionError::BadScore(score));
        }
        Ok(Self { bbox, score, label })
    }

    pub fn score(&self) -> f64 {
        self.score
    }
}

/// Input positions sorted by descending score; equal scores keep input order.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Indices (into `dets`) of the kept detections, in output order.
///
/// A detection is suppressed when its IoU with an already kept detection of the
/// same label is strictly greater than `iou_threshold`.
pub fn nms_indices(dets: &[Detection], iou_threshold: f64, max_out: usize) -> Result<Vec<usize>, DetectionError> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(DetectionError::BadThreshold(iou_threshold));
    }
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(dets) {
        if kept.len() >= max_out {
            break;
        }
        let d = &dets[i];
        let suppressed = kept.iter().any(|&k| {
            dets[k].label == d.label && geometry::iou(&dets[k].bbox, &d.bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}

pub fn nms(dets: &[Detection], iou_threshold: f64, max_out: usize) -> Result<Vec<Detection>, DetectionError> {
    Ok(nms_indices(dets, iou_threshold, max_out)?
        .into_iter()
        .map(|i| dets[i])
        .collect())
}
