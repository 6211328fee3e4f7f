//! Detection evaluation: one-to-one matching, AP, AR, FROC and size-stratified
//! reports.
//!
//! Matching is greedy per scan. Detections are visited in descending score
//! order (equal scores keep input order); each takes the unmatched
//! ground-truth box of the same label with the highest IoU, provided that IoU
//! is at least the threshold (ties go to the lower box index). Every box is
//! matched at most once.
//!
//! Pooled quantities visit scans in ascending `scan_id` order, so equal scores
//! across scans are ranked by scan id, then by input order.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::geometry::{self, Box3, Spacing};
use crate::nms::{score_order, Detection};

pub const DEFAULT_MAX_DET: usize = 100;
pub const DEFAULT_IOU_THRESHOLDS: [f64; 2] = [0.1, 0.3];
pub const DEFAULT_FP_AXIS: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];
/// Size-group edges in cm³: `<1`, `[1, 10)`, `[10, 50)`, `>=50`.
pub const DEFAULT_SIZE_BINS_CM3: [f64; 3] = [1.0, 10.0, 50.0];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("scan id '{0}' appears more than once")]
    DuplicateScanId(String),
    #[error("no ground-truth boxes: the metric is undefined")]
    ZeroGroundTruth,
    #[error("IoU threshold must lie in (0, 1], got {0}")]
    BadThreshold(f64),
    #[error("FP/scan axis must be positive and strictly ascending: {0:?}")]
    BadFpAxis(Vec<f64>),
    #[error("size bins must be positive and strictly ascending: {0:?}")]
    BadBins(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroundTruth {
    pub bbox: Box3,
    pub label: i64,
}

impl GroundTruth {
    pub fn new(bbox: Box3, label: i64) -> Self {
        Self { bbox, label }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanDetections {
    pub scan_id: String,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanGroundTruth {
    pub scan_id: String,
    pub spacing: Spacing,
    pub boxes: Vec<GroundTruth>,
}

/// Detections and ground truth joined by scan id.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub scan_id: String,
    pub spacing: Spacing,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    scans: Vec<Scan>,
}

impl EvalSet {
    /// Joins per-scan detections and ground truth. Scans present on only one
    /// side get an empty list on the other; a detection-only scan uses
    /// isotropic 1 mm spacing.
    pub fn new(dets: Vec<ScanDetections>, gts: Vec<ScanGroundTruth>) -> Result<Self, MetricsError> {
        let mut scans: BTreeMap<String, Scan> = BTreeMap::new();
        for g in gts {
            if scans.contains_key(&g.scan_id) {
                return Err(MetricsError::DuplicateScanId(g.scan_id));
            }
            scans.insert(
                g.scan_id.clone(),
                Scan {
                    scan_id: g.scan_id,
                    spacing: g.spacing,
                    detections: Vec::new(),
                    ground_truth: g.boxes,
                },
            );
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in dets {
            if !seen.insert(d.scan_id.clone()) {
                return Err(MetricsError::DuplicateScanId(d.scan_id));
            }
            scans
                .entry(d.scan_id.clone())
                .or_insert_with(|| Scan {
                    scan_id: d.scan_id.clone(),
                    spacing: Spacing::isotropic(),
                    detections: Vec::new(),
                    ground_truth: Vec::new(),
                })
                .detections = d.detections;
        }
        Ok(Self {
            scans: scans.into_values().collect(),
        })
    }

    pub fn scans(&self) -> &[Scan] {
        &self.scans
    }

    pub fn num_ground_truth(&self) -> usize {
        self.scans.iter().map(|s| s.ground_truth.len()).sum()
    }

    pub fn num_detections(&self) -> usize {
        self.scans.iter().map(|s| s.detections.len()).sum()
    }
}

/// Outcome of one detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DetFlag {
    /// Matched the ground-truth box at this index.
    Tp(usize),
    Fp,
    /// Matched a box outside the evaluated group; counts neither way.
    Ignored,
}

impl DetFlag {
    pub fn is_tp(&self) -> bool {
        matches!(self, DetFlag::Tp(_))
    }
}

/// Matching result for one scan, in descending score order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanMatch {
    pub scan_id: String,
    /// Input index of each detection.
    pub order: Vec<usize>,
    pub scores: Vec<f64>,
    pub flags: Vec<DetFlag>,
    /// Ground-truth boxes that count towards recall.
    pub n_gt: usize,
}

impl ScanMatch {
    pub fn tp(&self) -> usize {
        self.flags.iter().filter(|f| f.is_tp()).count()
    }

    pub fn fp(&self) -> usize {
        self.flags.iter().filter(|f| **f == DetFlag::Fp).count()
    }

    pub fn false_negatives(&self) -> usize {
        self.n_gt - self.tp()
    }
}

fn best_unmatched(
    det: &Detection,
    gts: &[GroundTruth],
    matched: &[bool],
    eligible: impl Fn(usize) -> bool,
    iou_t: f64,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (gi, gt) in gts.iter().enumerate() {
        if matched[gi] || gt.label != det.label || !eligible(gi) {
            continue;
        }
        let iou = geometry::iou(&det.bbox, &gt.bbox);
        if iou >= iou_t && best.is_none_or(|(_, b)| iou > b) {
            best = Some((gi, iou));
        }
    }
    best.map(|(gi, _)| gi)
}

/// Greedy one-to-one matching of one scan. Ground-truth boxes with
/// `counted[i] == false` act as ignore regions: a detection that can only be
/// matched to one of them is flagged [`DetFlag::Ignored`].
pub fn match_scan(scan: &Scan, counted: &[bool], iou_t: f64) -> ScanMatch {
    let gts = &scan.ground_truth;
    debug_assert_eq!(counted.len(), gts.len());
    let mut matched = vec![false; gts.len()];
    let order = score_order(&scan.detections);
    let mut flags = Vec::with_capacity(order.len());
    for &di in &order {
        let det = &scan.detections[di];
        let flag = if let Some(gi) = best_unmatched(det, gts, &matched, |g| counted[g], iou_t) {
            matched[gi] = true;
            DetFlag::Tp(gi)
        } else if let Some(gi) = best_unmatched(det, gts, &matched, |g| !counted[g], iou_t) {
            matched[gi] = true;
            DetFlag::Ignored
        } else {
            DetFlag::Fp
        };
        flags.push(flag);
    }
    ScanMatch {
        scan_id: scan.scan_id.clone(),
        scores: order.iter().map(|&i| scan.detections[i].score()).collect(),
        order,
        flags,
        n_gt: counted.iter().filter(|c| **c).count(),
    }
}

fn check_threshold(iou_t: f64) -> Result<(), MetricsError> {
    if iou_t > 0.0 && iou_t <= 1.0 {
        Ok(())
    } else {
        Err(MetricsError::BadThreshold(iou_t))
    }
}

/// Matches every scan with all ground-truth boxes counted.
pub fn match_detections(set: &EvalSet, iou_t: f64) -> Result<Vec<ScanMatch>, MetricsError> {
    check_threshold(iou_t)?;
    Ok(set
        .scans
        .iter()
        .map(|s| match_scan(s, &vec![true; s.ground_truth.len()], iou_t))
        .collect())
}

/// All-points interpolated average precision over score-sorted TP/FP flags:
/// the precision curve is made non-increasing from the right, then integrated
/// over recall.
pub fn average_precision(flags: &[bool], n_gt: usize) -> Result<f64, MetricsError> {
    if n_gt == 0 {
        return Err(MetricsError::ZeroGroundTruth);
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &is_tp) in flags.iter().enumerate() {
        tp += is_tp as usize;
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let area: f64 = flags
        .iter()
        .zip(&precision)
        .filter(|(t, _)| **t)
        .map(|(_, p)| p)
        .sum();
    Ok(area / n_gt as f64)
}

/// TP/FP flags of all scans merged by descending score; ignored detections
/// are dropped.
pub fn pooled_flags(matches: &[ScanMatch]) -> Vec<bool> {
    pooled(matches).into_iter().map(|(_, tp)| tp).collect()
}

fn pooled(matches: &[ScanMatch]) -> Vec<(f64, bool)> {
    let mut all: Vec<(f64, bool)> = matches
        .iter()
        .flat_map(|m| {
            m.scores
                .iter()
                .zip(&m.flags)
                .filter(|(_, f)| **f != DetFlag::Ignored)
                .map(|(s, f)| (*s, f.is_tp()))
        })
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    all
}

pub fn pooled_average_precision(matches: &[ScanMatch]) -> Result<f64, MetricsError> {
    let n_gt = matches.iter().map(|m| m.n_gt).sum();
    average_precision(&pooled_flags(matches), n_gt)
}

/// Fraction of counted ground-truth boxes matched by one of the `max_det`
/// highest-scoring detections of their scan.
pub fn average_recall(matches: &[ScanMatch], max_det: usize) -> Result<f64, MetricsError> {
    let n_gt: usize = matches.iter().map(|m| m.n_gt).sum();
    if n_gt == 0 {
        return Err(MetricsError::ZeroGroundTruth);
    }
    let tp: usize = matches
        .iter()
        .map(|m| m.flags.iter().take(max_det).filter(|f| f.is_tp()).count())
        .sum();
    Ok(tp as f64 / n_gt as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrocPoint {
    /// Detections with score >= threshold are kept; `+inf` for the empty set.
    pub threshold: f64,
    pub fp_per_scan: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrocCurve {
    /// Operating points, one per distinct score plus the empty set, by
    /// descending threshold.
    pub points: Vec<FrocPoint>,
    /// `(FP/scan, sensitivity)` at each requested FP rate.
    pub at_fp: Vec<(f64, f64)>,
}

fn check_fp_axis(fp_axis: &[f64]) -> Result<(), MetricsError> {
    let ok = fp_axis.iter().all(|f| *f > 0.0 && f.is_finite()) && fp_axis.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(MetricsError::BadFpAxis(fp_axis.to_vec()))
    }
}

/// Sweeps the score threshold over every distinct score. The sensitivity
/// reported at an FP rate is the best sensitivity among operating points
/// whose mean FP/scan does not exceed it.
pub fn froc(matches: &[ScanMatch], fp_axis: &[f64]) -> Result<FrocCurve, MetricsError> {
    check_fp_axis(fp_axis)?;
    let n_gt: usize = matches.iter().map(|m| m.n_gt).sum();
    if n_gt == 0 {
        return Err(MetricsError::ZeroGroundTruth);
    }
    let n_scans = matches.len().max(1) as f64;
    let all = pooled(matches);

    let mut points = vec![FrocPoint {
        threshold: f64::INFINITY,
        fp_per_scan: 0.0,
        sensitivity: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let threshold = all[i].0;
        while i < all.len() && all[i].0 == threshold {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(FrocPoint {
            threshold,
            fp_per_scan: fp as f64 / n_scans,
            sensitivity: tp as f64 / n_gt as f64,
        });
    }

    let at_fp = fp_axis
        .iter()
        .map(|&rate| {
            let s = points
                .iter()
                .filter(|p| p.fp_per_scan <= rate)
                .map(|p| p.sensitivity)
                .fold(0.0, f64::max);
            (rate, s)
        })
        .collect();
    Ok(FrocCurve { points, at_fp })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub max_det: usize,
    pub fp_axis: Vec<f64>,
    /// Ascending size-group edges in cm³; no stratification when empty.
    pub size_bins_cm3: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: DEFAULT_IOU_THRESHOLDS.to_vec(),
            max_det: DEFAULT_MAX_DET,
            fp_axis: DEFAULT_FP_AXIS.to_vec(),
            size_bins_cm3: DEFAULT_SIZE_BINS_CM3.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdReport {
    pub iou_threshold: f64,
    /// `None` when there is no counted ground truth.
    pub ap: Option<f64>,
    pub ar: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub ignored: usize,
    pub froc: Option<FrocCurve>,
}

impl ThresholdReport {
    pub fn from_matches(iou_threshold: f64, matches: &[ScanMatch], config: &EvalConfig) -> Self {
        let tp = matches.iter().map(ScanMatch::tp).sum();
        let fp = matches.iter().map(ScanMatch::fp).sum();
        let ignored = matches
            .iter()
            .map(|m| m.flags.iter().filter(|f| **f == DetFlag::Ignored).count())
            .sum();
        let n_gt: usize = matches.iter().map(|m| m.n_gt).sum();
        Self {
            iou_threshold,
            ap: pooled_average_precision(matches).ok(),
            ar: average_recall(matches, config.max_det).ok(),
            tp,
            fp,
            fn_: n_gt - tp,
            ignored,
            froc: froc(matches, &config.fp_axis).ok(),
        }
    }
}

/// Half-open physical-volume range of a size group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeGroup {
    pub name: String,
    pub lo_cm3: f64,
    pub hi_cm3: f64,
}

impl SizeGroup {
    pub fn contains(&self, cm3: f64) -> bool {
        self.lo_cm3 <= cm3 && cm3 < self.hi_cm3
    }
}

fn fmt_edge(v: f64) -> String {
    format!("{v}")
}

/// Groups `<e0`, `[e0-e1]`, ..., `>e_last` for ascending edges; every range is
/// half-open `[lo, hi)` regardless of the display name.
pub fn size_groups(bins_cm3: &[f64]) -> Result<Vec<SizeGroup>, MetricsError> {
    let ok = bins_cm3.iter().all(|b| *b > 0.0 && b.is_finite()) && bins_cm3.windows(2).all(|w| w[0] < w[1]);
    if !ok || bins_cm3.is_empty() {
        return Err(MetricsError::BadBins(bins_cm3.to_vec()));
    }
    let mut groups = vec![SizeGroup {
        name: format!("<{}", fmt_edge(bins_cm3[0])),
        lo_cm3: 0.0,
        hi_cm3: bins_cm3[0],
    }];
    for w in bins_cm3.windows(2) {
        groups.push(SizeGroup {
            name: format!("[{}-{}]", fmt_edge(w[0]), fmt_edge(w[1])),
            lo_cm3: w[0],
            hi_cm3: w[1],
        });
    }
    let last = *bins_cm3.last().expect("non-empty");
    groups.push(SizeGroup {
        name: format!(">{}", fmt_edge(last)),
        lo_cm3: last,
        hi_cm3: f64::INFINITY,
    });
    Ok(groups)
}

pub fn size_group_of(groups: &[SizeGroup], cm3: f64) -> Option<usize> {
    groups.iter().position(|g| g.contains(cm3))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub group: SizeGroup,
    pub n_gt: usize,
    pub thresholds: Vec<ThresholdReport>,
}

/// Per-group evaluation. Boxes outside a group are ignore regions for that
/// group: detections matched to them are dropped instead of counted as false
/// positives.
pub fn size_stratified(set: &EvalSet, config: &EvalConfig) -> Result<Vec<GroupReport>, MetricsError> {
    for &t in &config.iou_thresholds {
        check_threshold(t)?;
    }
    let groups = size_groups(&config.size_bins_cm3)?;
    let membership: Vec<Vec<Option<usize>>> = set
        .scans
        .iter()
        .map(|s| {
            s.ground_truth
                .iter()
                .map(|g| size_group_of(&groups, s.spacing.volume_cm3(&g.bbox)))
                .collect()
        })
        .collect();

    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(gi, group)| {
            let counted: Vec<Vec<bool>> = membership
                .iter()
                .map(|m| m.iter().map(|g| *g == Some(gi)).collect())
                .collect();
            let n_gt = counted.iter().flatten().filter(|c| **c).count();
            let thresholds = config
                .iou_thresholds
                .iter()
                .map(|&t| {
                    let matches: Vec<ScanMatch> = set
                        .scans
                        .iter()
                        .zip(&counted)
                        .map(|(s, c)| match_scan(s, c, t))
                        .collect();
                    ThresholdReport::from_matches(t, &matches, config)
                })
                .collect();
            GroupReport {
                group,
                n_gt,
                thresholds,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_scans: usize,
    pub n_gt: usize,
    pub n_det: usize,
    pub max_det: usize,
    pub thresholds: Vec<ThresholdReport>,
    pub size_groups: Vec<GroupReport>,
}

pub fn evaluate(set: &EvalSet, config: &EvalConfig) -> Result<EvalReport, MetricsError> {
    check_fp_axis(&config.fp_axis)?;
    let mut thresholds = Vec::with_capacity(config.iou_thresholds.len());
    for &t in &config.iou_thresholds {
        let matches = match_detections(set, t)?;
        thresholds.push(ThresholdReport::from_matches(t, &matches, config));
    }
    let size_groups = if config.size_bins_cm3.is_empty() {
        Vec::new()
    } else {
        size_stratified(set, config)?
    };
    Ok(EvalReport {
        n_scans: set.scans.len(),
        n_gt: set.num_ground_truth(),
        n_det: set.num_detections(),
        max_det: config.max_det,
        thresholds,
        size_groups,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    /// Fixed-width text table, one row per group and threshold.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "scans {}  gt {}  detections {}  max_det {}",
            self.n_scans, self.n_gt, self.n_det, self.max_det
        );
        let _ = writeln!(
            out,
            "{:<10} {:>6} {:>6} {:>8} {:>8} {:>6} {:>6} {:>6}",
            "group", "n_gt", "iou", "AP", "AR", "TP", "FP", "FN"
        );
        let rows = std::iter::once(("all".to_string(), self.n_gt, &self.thresholds)).chain(
            self.size_groups
                .iter()
                .map(|g| (g.group.name.clone(), g.n_gt, &g.thresholds)),
        );
        for (name, n_gt, reports) in rows {
            for r in reports {
                let _ = writeln!(
                    out,
                    "{:<10} {:>6} {:>6.2} {:>8} {:>8} {:>6} {:>6} {:>6}",
                    name,
                    n_gt,
                    r.iou_threshold,
                    opt(r.ap),
                    opt(r.ar),
                    r.tp,
                    r.fp,
                    r.fn_
                );
            }
        }
        out
    }
}

impl FrocCurve {
    /// Two whitespace-separated columns `fp_per_scan sensitivity`, one line per
    /// requested FP rate.
    pub fn to_columns(&self) -> String {
        let mut out = String::from("# fp_per_scan sensitivity\n");
        for (f, s) in &self.at_fp {
            let _ = writeln!(out, "{f} {s}");
        }
        out
    }
}
