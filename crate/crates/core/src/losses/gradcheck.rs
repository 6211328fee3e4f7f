//! Central finite-difference verification of the analytic loss gradients.

use serde::Serialize;
use thiserror::Error;

use super::{BoxLoss, BoxParam, Gradient, IouTerms};
use crate::geometry::aspect_term_sizes;

/// Floor on the denominator of the relative error, so that components whose
/// true derivative is exactly zero compare on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradCheckError {
    #[error("{loss} is not differentiable within one step of this point: {reason}")]
    NonDifferentiablePoint { loss: &'static str, reason: String },
    #[error("finite-difference step must be > 0, got {0}")]
    BadStep(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub loss: &'static str,
    pub analytic: Gradient,
    pub numeric: Gradient,
    pub max_rel_error: f64,
    /// Parameter index with the largest relative error.
    pub worst_param: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Per-parameter finite-difference step: `step * max(1, |theta_i|)`.
pub fn scaled_steps(pred: &BoxParam, step: f64) -> [f64; 6] {
    pred.to_array().map(|t| step * t.abs().max(1.0))
}

/// Compares the analytic gradient of `loss` at `pred` against central
/// differences over all six parameters. For VC-IoU the trade-off weight is
/// frozen at its value at `pred`.
pub fn gradient_check(
    loss: BoxLoss,
    pred: &BoxParam,
    gt: &BoxParam,
    step: f64,
) -> Result<GradCheckReport, GradCheckError> {
    if !(step > 0.0) {
        return Err(GradCheckError::BadStep(step));
    }
    let steps = scaled_steps(pred, step);
    if let Some(reason) = find_kink(loss, pred, gt, &steps) {
        return Err(GradCheckError::NonDifferentiablePoint {
            loss: loss.name(),
            reason,
        });
    }

    let analytic = loss
        .evaluate(pred, gt)
        .gradient
        .expect("all kernels report a gradient");

    let frozen_alpha = IouTerms::compute(pred, gt).alpha;
    let f = |theta: [f64; 6]| -> f64 {
        let p = BoxParam::from_array(theta).expect("steps keep sizes positive");
        match loss {
            BoxLoss::Vciou => {
                let t = IouTerms::compute(&p, gt);
                t.diou + frozen_alpha * aspect_term_sizes(p.size(), gt.size())
            }
            other => other.value(&p, gt),
        }
    };

    let base = pred.to_array();
    let mut numeric = [0.0; 6];
    for i in 0..6 {
        let mut plus = base;
        let mut minus = base;
        plus[i] += steps[i];
        minus[i] -= steps[i];
        numeric[i] = (f(plus) - f(minus)) / (plus[i] - minus[i]);
    }

    let (worst_param, max_rel_error) = (0..6)
        .map(|i| (i, relative_error(analytic[i], numeric[i])))
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });

    Ok(GradCheckReport {
        loss: loss.name(),
        analytic,
        numeric,
        max_rel_error,
        worst_param,
    })
}

/// Reports the first non-smooth configuration reachable by a `±step`
/// perturbation: coinciding or touching faces for the IoU family, the
/// `|x| = beta` switch for smooth L1.
fn find_kink(loss: BoxLoss, pred: &BoxParam, gt: &BoxParam, steps: &[f64; 6]) -> Option<String> {
    match loss {
        BoxLoss::SmoothL1 { beta } => {
            let (p, g) = (pred.to_array(), gt.to_array());
            (0..6).find_map(|i| {
                let gap = ((p[i] - g[i]).abs() - beta).abs();
                (gap <= 2.0 * steps[i]).then(|| format!("parameter {i} is {gap:e} from the beta switch"))
            })
        }
        BoxLoss::Diou | BoxLoss::Vciou => (0..3).find_map(|axis| {
            // a face moves by at most step_c + step_s / 2
            let reach = 2.0 * (steps[axis] + 0.5 * steps[axis + 3]);
            let (p, q) = (pred.lo(axis), pred.hi(axis));
            let (a, b) = (gt.lo(axis), gt.hi(axis));
            [("min/min", p - a), ("max/max", q - b), ("max/min", q - a), ("min/max", p - b)]
                .into_iter()
                .find(|(_, d)| d.abs() <= reach)
                .map(|(which, d)| format!("axis {axis} {which} faces {:e} apart", d.abs()))
        }),
    }
}
