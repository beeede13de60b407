//! Propensity scores by main-effects logistic regression and one-pass
//! trimming of units outside the common score support.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 100;
pub const GRADIENT_TOLERANCE: f64 = 1e-8;
pub const SEPARATION_RIDGE: f64 = 1e-4;
/// Linear predictors beyond this magnitude are taken as a sign of (quasi-)separation.
const SEPARATION_ETA: f64 = 15.0;
const SCORE_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    /// Intercept followed by one coefficient per input column. Constant
    /// columns get coefficient 0.
    pub coefficients: Vec<f64>,
    pub scores: Vec<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    /// Set when the unpenalized fit diverged and a ridge refit was used.
    pub separation: bool,
    /// Objective (log-likelihood, penalized when ridge is active) after each iteration.
    pub loglik_trace: Vec<f64>,
}

struct Standardized {
    /// intercept column first
    x: DMatrix<f64>,
    kept: Vec<usize>,
    means: Vec<f64>,
    sds: Vec<f64>,
}

fn standardize(x: &DMatrix<f64>) -> Standardized {
    let n = x.nrows();
    let mut kept = Vec::new();
    let mut means = Vec::new();
    let mut sds = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        if var > 1e-14 * (1.0 + mean * mean) {
            kept.push(j);
            means.push(mean);
            sds.push(var.sqrt());
        }
    }
    let xs = DMatrix::from_fn(n, kept.len() + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            (x[(i, kept[j - 1])] - means[j - 1]) / sds[j - 1]
        }
    });
    Standardized { x: xs, kept, means, sds }
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(eta)) without overflow.
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

fn objective(x: &DMatrix<f64>, z: &[f64], beta: &DVector<f64>, ridge: f64) -> f64 {
    let eta = x * beta;
    let ll: f64 = eta.iter().zip(z).map(|(&e, &y)| y * e - softplus(e)).sum();
    let penalty: f64 = beta.iter().skip(1).map(|b| b * b).sum::<f64>();
    ll - 0.5 * ridge * penalty
}

struct IrlsFit {
    beta: DVector<f64>,
    iterations: usize,
    gradient_norm: f64,
    converged: bool,
    trace: Vec<f64>,
}

fn irls(x: &DMatrix<f64>, z: &[f64], ridge: f64) -> IrlsFit {
    let p = x.ncols();
    let mut beta = DVector::zeros(p);
    // intercept at the logit of the base rate
    let rate = z.iter().sum::<f64>() / z.len() as f64;
    beta[0] = (rate / (1.0 - rate)).ln();
    let mut obj = objective(x, z, &beta, ridge);
    let mut trace = Vec::new();
    let mut gradient_norm = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITERATIONS {
        let eta = x * &beta;
        let probs: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
        let resid = DVector::from_iterator(z.len(), z.iter().zip(&probs).map(|(y, p)| y - p));
        let mut grad = x.transpose() * resid;
        for j in 1..p {
            grad[j] -= ridge * beta[j];
        }
        gradient_norm = grad.amax();
        converged = gradient_norm < GRADIENT_TOLERANCE;
        let mut xw = x.clone();
        for (i, pr) in probs.iter().enumerate() {
            let w = (pr * (1.0 - pr)).max(1e-300);
            xw.row_mut(i).scale_mut(w);
        }
        let mut hess = x.transpose() * xw;
        for j in 1..p {
            hess[(j, j)] += ridge;
        }
        let step = match hess.clone().svd(true, true).solve(&grad, 1e-12 * hess.amax().max(1e-300)) {
            Ok(s) => s,
            Err(_) => break,
        };
        if converged {
            // one last full step takes the iterate to working precision
            beta += step;
            break;
        }
        // step halving keeps the objective non-decreasing
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta + &step * t;
            let cand_obj = objective(x, z, &cand, ridge);
            if cand_obj.is_finite() && cand_obj >= obj {
                beta = cand;
                obj = cand_obj;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        trace.push(obj);
        if !accepted {
            break;
        }
    }
    IrlsFit { beta, iterations, gradient_norm, converged, trace }
}

/// Maximum-likelihood logistic regression of `exposed` on the columns of `x`
/// plus an intercept, by iteratively reweighted least squares.
pub fn fit_logistic(x: &DMatrix<f64>, exposed: &[bool]) -> Result<PropensityModel> {
    if x.nrows() != exposed.len() {
        return Err(Error::Input(format!("{} rows but {} exposure labels", x.nrows(), exposed.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("design matrix has non-finite entries".into()));
    }
    let n_exposed = exposed.iter().filter(|&&e| e).count();
    if n_exposed == 0 || n_exposed == exposed.len() {
        return Err(Error::Degenerate("exposure indicator has a single class".into()));
    }
    let z: Vec<f64> = exposed.iter().map(|&e| f64::from(u8::from(e))).collect();
    let st = standardize(x);

    let mut fit = irls(&st.x, &z, 0.0);
    let eta = &st.x * &fit.beta;
    let diverged = !fit.converged
        || fit.beta.iter().any(|b| !b.is_finite())
        || eta.iter().any(|e| e.abs() > SEPARATION_ETA);
    if diverged {
        fit = irls(&st.x, &z, SEPARATION_RIDGE);
    }

    let eta = &st.x * &fit.beta;
    let scores = eta.iter().map(|&e| sigmoid(e).clamp(SCORE_FLOOR, 1.0 - SCORE_FLOOR)).collect();
    let mut coefficients = vec![0.0; x.ncols() + 1];
    let mut intercept = fit.beta[0];
    for (k, &j) in st.kept.iter().enumerate() {
        let b = fit.beta[k + 1] / st.sds[k];
        coefficients[j + 1] = b;
        intercept -= b * st.means[k];
    }
    coefficients[0] = intercept;
    Ok(PropensityModel {
        coefficients,
        scores,
        iterations: fit.iterations,
        gradient_norm: fit.gradient_norm,
        converged: fit.converged,
        separation: diverged,
        loglik_trace: fit.trace,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrimResult {
    pub retained: Vec<usize>,
    pub dropped_exposed: Vec<usize>,
    pub dropped_control: Vec<usize>,
}

impl TrimResult {
    /// Trimming left one of the groups empty.
    pub fn no_overlap(&self, exposed: impl Fn(usize) -> bool) -> bool {
        let e = self.retained.iter().filter(|&&u| exposed(u)).count();
        e == 0 || e == self.retained.len()
    }
}

/// Drops exposed units scoring above every control and controls scoring
/// below every exposed unit. Thresholds come from the untrimmed scores.
pub fn trim_extremes(units: &[usize], scores: &[f64], exposed: &[bool]) -> TrimResult {
    let max_control = units
        .iter()
        .zip(scores)
        .zip(exposed)
        .filter(|(_, &e)| !e)
        .map(|((_, &s), _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let min_exposed = units
        .iter()
        .zip(scores)
        .zip(exposed)
        .filter(|(_, &e)| e)
        .map(|((_, &s), _)| s)
        .fold(f64::INFINITY, f64::min);
    let mut out = TrimResult { retained: Vec::new(), dropped_exposed: Vec::new(), dropped_control: Vec::new() };
    let one_sided = max_control == f64::NEG_INFINITY || min_exposed == f64::INFINITY;
    for ((&u, &s), &e) in units.iter().zip(scores).zip(exposed) {
        if !one_sided && e && s > max_control {
            out.dropped_exposed.push(u);
        } else if !one_sided && !e && s < min_exposed {
            out.dropped_control.push(u);
        } else {
            out.retained.push(u);
        }
    }
    out
}
