//! Training losses and a central-difference gradient checker.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var, PROB_FLOOR};
use crate::tensor::Mat;
use crate::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_loc: f64,
    pub loss_fus: f64,
    pub total: f64,
    pub alpha: f64,
    /// Set when some true-class probability fell below the clamp floor.
    #[serde(default)]
    pub clamped: bool,
}

/// Mean cross-entropy of `probs` (`B × 2`) at the true classes, plus a flag
/// raised when any probability had to be clamped.
fn nll(probs: &Mat, labels: &[usize]) -> Result<(f64, bool)> {
    if probs.rows() != labels.len() || probs.rows() == 0 {
        return Err(Error::Input(format!(
            "{} probability rows for {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    let mut clamped = false;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let p = probs.get(i, y);
        if p < PROB_FLOOR {
            clamped = true;
        }
        total -= p.max(PROB_FLOOR).ln();
    }
    Ok((total / labels.len() as f64, clamped))
}

/// Cross-entropy summed over both modalities and averaged over the batch.
pub fn loss_loc(y_rgb: &Mat, y_sobel: &Mat, labels: &[usize]) -> Result<(f64, bool)> {
    let (a, ca) = nll(y_rgb, labels)?;
    let (b, cb) = nll(y_sobel, labels)?;
    Ok((a + b, ca || cb))
}

pub fn loss_fus(y_fus: &Mat, labels: &[usize]) -> Result<(f64, bool)> {
    nll(y_fus, labels)
}

pub fn total_loss(loc: f64, fus: f64, alpha: f64) -> Result<LossBreakdown> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    Ok(LossBreakdown {
        loss_loc: loc,
        loss_fus: fus,
        total: loc + alpha * fus,
        alpha,
        clamped: false,
    })
}

/// Graph nodes for the three losses.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub loc: Var,
    pub fus: Var,
    pub total: Var,
}

pub fn loss_vars(
    g: &mut Graph,
    y_rgb: Var,
    y_sobel: Var,
    y_fus: Var,
    labels: &[usize],
    alpha: f64,
) -> Result<LossVars> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    let a = g.nll(y_rgb, labels);
    let b = g.nll(y_sobel, labels);
    let loc = g.add(a, b);
    let fus = g.nll(y_fus, labels);
    let weighted = g.scale(fus, alpha);
    let total = g.add(loc, weighted);
    Ok(LossVars { loc, fus, total })
}

/// Relative error used by [`grad_check`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `f` at `params` over
/// the coordinates in `coords`, returning the largest relative error.
pub fn grad_check<F>(mut f: F, params: &[f64], analytic: &[f64], eps: f64, coords: &[usize]) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(Error::Input("analytic gradient length differs from parameters".into()));
    }
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        if i >= p.len() {
            return Err(Error::Input(format!("coordinate {i} out of range")));
        }
        let orig = p[i];
        p[i] = orig + eps;
        let plus = f(&p)?;
        p[i] = orig - eps;
        let minus = f(&p)?;
        p[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at coordinate {i} (analytic {}, numeric {numeric})",
                analytic[i]
            )));
        }
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
