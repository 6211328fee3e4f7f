//! Box-regression loss kernels with analytic gradients.
//!
//! Every loss is differentiated with respect to the center-size parameterization
//! `(cz, cy, cx, d, h, w)` of the prediction; the ground truth is a constant.
//!
//! The VC-IoU loss adds a trade-off weighted aspect penalty to DIoU:
//!
//! ```text
//! v     = 4/pi^2 * sum over (w/h, h/d, d/w) of (atan(r_gt) - atan(r))^2
//! alpha = v / (1 - IoU + v)
//! loss  = DIoU + alpha * v
//! ```
//!
//! `alpha` is treated as a constant when differentiating: the reported gradient
//! is `dDIoU + alpha * dv`. The finite-difference checker in [`gradcheck`]
//! freezes `alpha` at the evaluation point to match.

pub mod gradcheck;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geometry::{self, Box3, GeometryError, ASPECT_SCALE, X, Y, Z};

/// Center-size box parameterization, `center = (cz, cy, cx)`, `size = (d, h, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxParam {
    center: [f64; 3],
    size: [f64; 3],
}

impl BoxParam {
    pub fn new(center: [f64; 3], size: [f64; 3]) -> Result<Self, GeometryError> {
        for axis in 0..3 {
            if !center[axis].is_finite() {
                return Err(GeometryError::NonFinite { axis });
            }
            if !(size[axis] > 0.0 && size[axis].is_finite()) {
                return Err(GeometryError::NonPositiveSize {
                    axis,
                    size: size[axis],
                });
            }
        }
        Ok(Self { center, size })
    }

    /// From a row `(cz, cy, cx, d, h, w)`.
    pub fn from_array(p: [f64; 6]) -> Result<Self, GeometryError> {
        Self::new([p[0], p[1], p[2]], [p[3], p[4], p[5]])
    }

    pub fn from_box(b: &Box3) -> Self {
        Self {
            center: b.center(),
            size: b.extents(),
        }
    }

    pub fn center(&self) -> [f64; 3] {
        self.center
    }

    pub fn size(&self) -> [f64; 3] {
        self.size
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.center[0], self.center[1], self.center[2], self.size[0], self.size[1], self.size[2],
        ]
    }

    pub fn to_box(&self) -> Box3 {
        Box3::from_center_size(self.center, self.size)
            .expect("BoxParam invariants guarantee a valid box")
    }

    pub(crate) fn lo(&self, axis: usize) -> f64 {
        self.center[axis] - 0.5 * self.size[axis]
    }

    pub(crate) fn hi(&self, axis: usize) -> f64 {
        self.center[axis] + 0.5 * self.size[axis]
    }
}

/// Gradient with respect to `(cz, cy, cx, d, h, w)`.
pub type Gradient = [f64; 6];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossValue {
    pub value: f64,
    pub gradient: Option<Gradient>,
}

/// Intermediate quantities of the IoU-family losses at one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IouTerms {
    pub iou: f64,
    /// Squared center distance.
    pub rho_sq: f64,
    /// Squared diagonal of the enclosing box.
    pub c_sq: f64,
    pub diou: f64,
    pub v: f64,
    pub alpha: f64,
}

impl IouTerms {
    pub fn compute(pred: &BoxParam, gt: &BoxParam) -> Self {
        let (pb, gb) = (pred.to_box(), gt.to_box());
        let iou = geometry::iou(&pb, &gb);
        let rho_sq = geometry::center_distance_sq(&pb, &gb);
        let c_sq = geometry::enclosing_box(&pb, &gb).diagonal_sq();
        let diou = 1.0 - iou + rho_sq / c_sq;
        let v = geometry::aspect_term_sizes(pred.size, gt.size);
        Self {
            iou,
            rho_sq,
            c_sq,
            diou,
            v,
            alpha: trade_off(iou, v),
        }
    }

    pub fn vciou(&self) -> f64 {
        self.diou + self.alpha * self.v
    }
}

/// `v / (1 - IoU + v)`, defined as 0 when `v = 0`.
pub fn trade_off(iou: f64, v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v / (1.0 - iou + v)
    }
}

/// Which loss kernel to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoxLoss {
    SmoothL1 { beta: f64 },
    Diou,
    Vciou,
}

impl BoxLoss {
    pub const DEFAULT_BETA: f64 = 1.0;

    pub fn name(&self) -> &'static str {
        match self {
            BoxLoss::SmoothL1 { .. } => "smooth-l1",
            BoxLoss::Diou => "diou",
            BoxLoss::Vciou => "vciou",
        }
    }

    pub fn evaluate(&self, pred: &BoxParam, gt: &BoxParam) -> LossValue {
        match *self {
            BoxLoss::SmoothL1 { beta } => smooth_l1(pred, gt, beta),
            BoxLoss::Diou => diou_loss(pred, gt),
            BoxLoss::Vciou => vciou_loss(pred, gt),
        }
    }

    pub fn value(&self, pred: &BoxParam, gt: &BoxParam) -> f64 {
        match *self {
            BoxLoss::SmoothL1 { beta } => smooth_l1_value(pred, gt, beta),
            BoxLoss::Diou => IouTerms::compute(pred, gt).diou,
            BoxLoss::Vciou => IouTerms::compute(pred, gt).vciou(),
        }
    }
}

impl fmt::Display for BoxLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BoxLoss {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "smooth-l1" | "smooth_l1" => Ok(BoxLoss::SmoothL1 {
                beta: Self::DEFAULT_BETA,
            }),
            "diou" => Ok(BoxLoss::Diou),
            "vciou" | "vc-iou" => Ok(BoxLoss::Vciou),
            other => Err(format!("unknown loss '{other}' (smooth-l1 | diou | vciou)")),
        }
    }
}

#[inline]
fn huber(x: f64, beta: f64) -> (f64, f64) {
    let a = x.abs();
    if a < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (a - 0.5 * beta, x.signum())
    }
}

fn smooth_l1_value(pred: &BoxParam, gt: &BoxParam, beta: f64) -> f64 {
    let (p, g) = (pred.to_array(), gt.to_array());
    (0..6).map(|i| huber(p[i] - g[i], beta).0).sum()
}

/// Elementwise Huber over the six parameters, summed.
///
/// Panics if `beta` is not strictly positive.
pub fn smooth_l1(pred: &BoxParam, gt: &BoxParam, beta: f64) -> LossValue {
    assert!(beta > 0.0, "smooth L1 beta must be > 0, got {beta}");
    let (p, g) = (pred.to_array(), gt.to_array());
    let mut value = 0.0;
    let mut gradient = [0.0; 6];
    for i in 0..6 {
        let (v, d) = huber(p[i] - g[i], beta);
        value += v;
        gradient[i] = d;
    }
    LossValue {
        value,
        gradient: Some(gradient),
    }
}

/// Derivative selector for `min`/`max` of two faces: 1 when `x < y`, 0 when
/// `x > y`, and the mean of the one-sided derivatives (1/2) on coincidence.
#[inline]
fn below(x: f64, y: f64) -> f64 {
    if x < y {
        1.0
    } else if x == y {
        0.5
    } else {
        0.0
    }
}

/// Value and parameter gradient of the intersection, union, IoU, squared
/// enclosing diagonal and squared center distance.
struct Partials {
    terms: IouTerms,
    d_iou: Gradient,
    d_rho_sq: Gradient,
    d_c_sq: Gradient,
}

fn partials(pred: &BoxParam, gt: &BoxParam) -> Partials {
    let terms = IouTerms::compute(pred, gt);

    let mut overlap = [0.0; 3];
    // d overlap / d (center, size) per axis
    let mut d_overlap = [(0.0, 0.0); 3];
    let mut d_c_sq = [0.0; 6];
    let mut d_rho_sq = [0.0; 6];
    for i in 0..3 {
        let (p, q) = (pred.lo(i), pred.hi(i));
        let (a, b) = (gt.lo(i), gt.hi(i));

        let len = q.min(b) - p.max(a);
        overlap[i] = len.max(0.0);
        let (dq, dp) = if len > 0.0 {
            (below(q, b), -below(a, p))
        } else {
            (0.0, 0.0)
        };
        d_overlap[i] = (dq + dp, 0.5 * (dq - dp));

        let enclosing = q.max(b) - p.min(a);
        let eq = below(b, q);
        let ep = -below(p, a);
        d_c_sq[i] = 2.0 * enclosing * (eq + ep);
        d_c_sq[i + 3] = 2.0 * enclosing * 0.5 * (eq - ep);

        d_rho_sq[i] = 2.0 * (pred.center[i] - gt.center[i]);
    }

    let inter: f64 = overlap.iter().product();
    let size = pred.size;
    let pred_vol: f64 = size.iter().product();
    let gt_vol: f64 = gt.size.iter().product();
    let union = pred_vol + gt_vol - inter;

    let mut d_iou = [0.0; 6];
    for i in 0..3 {
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        let others = overlap[j] * overlap[k];
        let d_inter_c = others * d_overlap[i].0;
        let d_inter_s = others * d_overlap[i].1;
        let d_pred_vol_s = size[j] * size[k];
        // d(inter/union) = (d_inter * union - inter * (d_vol - d_inter)) / union^2
        d_iou[i] = (d_inter_c * union + inter * d_inter_c) / (union * union);
        d_iou[i + 3] = (d_inter_s * union - inter * (d_pred_vol_s - d_inter_s)) / (union * union);
    }

    Partials {
        terms,
        d_iou,
        d_rho_sq,
        d_c_sq,
    }
}

fn diou_gradient(p: &Partials) -> Gradient {
    let t = &p.terms;
    std::array::from_fn(|i| {
        -p.d_iou[i] + p.d_rho_sq[i] / t.c_sq - t.rho_sq * p.d_c_sq[i] / (t.c_sq * t.c_sq)
    })
}

/// Gradient of the aspect term `v` with respect to the prediction; only the
/// size entries are non-zero.
pub fn aspect_term_gradient(pred: [f64; 3], gt: [f64; 3]) -> Gradient {
    let (d, h, w) = (pred[Z], pred[Y], pred[X]);
    let rp = geometry::aspect_ratios(pred);
    let rg = geometry::aspect_ratios(gt);
    let gap: [f64; 3] = std::array::from_fn(|k| 2.0 * ASPECT_SCALE * (rp[k].atan() - rg[k].atan()));

    // atan(w/h), atan(h/d), atan(d/w)
    let wh = w * w + h * h;
    let hd = h * h + d * d;
    let dw = d * d + w * w;
    let dv_dw = gap[0] * h / wh - gap[2] * d / dw;
    let dv_dh = -gap[0] * w / wh + gap[1] * d / hd;
    let dv_dd = -gap[1] * h / hd + gap[2] * w / dw;

    let mut g = [0.0; 6];
    g[3 + Z] = dv_dd;
    g[3 + Y] = dv_dh;
    g[3 + X] = dv_dw;
    g
}

/// `1 - IoU + rho^2 / c^2`; in `[0, 2)`.
pub fn diou_loss(pred: &BoxParam, gt: &BoxParam) -> LossValue {
    let p = partials(pred, gt);
    LossValue {
        value: p.terms.diou,
        gradient: Some(diou_gradient(&p)),
    }
}

/// DIoU plus the trade-off weighted aspect penalty. The gradient treats the
/// trade-off weight as a constant.
pub fn vciou_loss(pred: &BoxParam, gt: &BoxParam) -> LossValue {
    let p = partials(pred, gt);
    let mut gradient = diou_gradient(&p);
    let alpha = p.terms.alpha;
    if alpha != 0.0 {
        let dv = aspect_term_gradient(pred.size, gt.size);
        for (g, d) in gradient.iter_mut().zip(dv) {
            *g += alpha * d;
        }
    }
    LossValue {
        value: p.terms.vciou(),
        gradient: Some(gradient),
    }
}

/// Batch reduction applied to loss values; gradients are scaled to match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    /// Unreduced per-pair values.
    pub values: Vec<f64>,
    /// Mean or sum of `values`; `None` for [`Reduction::None`].
    pub reduced: Option<f64>,
    /// Per-row gradients of the reduced loss (or of each value for `None`).
    pub gradients: Vec<Gradient>,
}

pub fn batch_loss(loss: BoxLoss, preds: &[BoxParam], gts: &[BoxParam], reduction: Reduction) -> BatchLoss {
    assert_eq!(preds.len(), gts.len(), "pred/gt batch length mismatch");
    let n = preds.len();
    let scale = match reduction {
        Reduction::Mean if n > 0 => 1.0 / n as f64,
        _ => 1.0,
    };
    let mut values = Vec::with_capacity(n);
    let mut gradients = Vec::with_capacity(n);
    for (p, g) in preds.iter().zip(gts) {
        let lv = loss.evaluate(p, g);
        values.push(lv.value);
        let grad = lv.gradient.unwrap_or([0.0; 6]);
        gradients.push(if scale == 1.0 { grad } else { grad.map(|x| x * scale) });
    }
    let reduced = match reduction {
        Reduction::Mean => Some(if n == 0 { 0.0 } else { values.iter().sum::<f64>() / n as f64 }),
        Reduction::Sum => Some(values.iter().sum()),
        Reduction::None => None,
    };
    BatchLoss {
        values,
        reduced,
        gradients,
    }
}
