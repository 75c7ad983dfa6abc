//! Profile empirical likelihood of the linear model.
//!
//! For coefficients `theta` the estimating functions are
//! `g_i = x_i (y_i - x_i' theta)`. The profile log-likelihood (without the
//! constant `-n log n`) is `-sum_i log(1 + gamma' g_i)`, where the Lagrange
//! multiplier `gamma` maximizes the concave dual `sum_i log(1 + gamma' g_i)`.
//! The dual is solved with damped Newton steps that keep every denominator
//! inside the domain.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{BenelError, Result};

/// Residual level above which a non-converged solve is declared infeasible.
const INFEASIBLE_RESIDUAL: f64 = 1e-4;
/// Smallest line-search step before the solve is declared stalled.
const MIN_STEP: f64 = 1e-12;
/// At a stationary point the implied weights `1/(n d_i)` sum to one.
const WEIGHT_SUM_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElConfig {
    /// Sup-norm tolerance on `sum_i g_i / d_i`.
    pub newton_tol: f64,
    pub max_newton_iters: usize,
    /// Floor every denominator must stay above during the line search.
    pub min_denominator: f64,
}

impl Default for ElConfig {
    fn default() -> Self {
        Self {
            newton_tol: 1e-8,
            max_newton_iters: 50,
            min_denominator: 1e-8,
        }
    }
}

impl ElConfig {
    fn validate(&self, n: usize) -> Result<()> {
        if !(self.newton_tol > 0.0) {
            return Err(BenelError::InvalidInput("newton_tol must be positive".into()));
        }
        if self.max_newton_iters == 0 {
            return Err(BenelError::InvalidInput("max_newton_iters must be at least 1".into()));
        }
        if !(self.min_denominator > 0.0 && self.min_denominator < 1.0 / n as f64) {
            return Err(BenelError::InvalidInput(format!(
                "min_denominator must lie in (0, 1/n) = (0, {})",
                1.0 / n as f64
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElResult {
    /// `-sum_i log d_i`, or negative infinity when infeasible.
    pub log_el: f64,
    pub gamma: DVector<f64>,
    /// `d_i = 1 + gamma' g_i`.
    pub denominators: DVector<f64>,
    pub feasible: bool,
    pub newton_iters: usize,
}

impl ElResult {
    /// Implied observation weights `1 / (n d_i)`.
    pub fn weights(&self) -> DVector<f64> {
        let n = self.denominators.len() as f64;
        self.denominators.map(|d| 1.0 / (n * d))
    }

    fn infeasible(gamma: DVector<f64>, denominators: DVector<f64>, iters: usize) -> Self {
        Self {
            log_el: f64::NEG_INFINITY,
            gamma,
            denominators,
            feasible: false,
            newton_iters: iters,
        }
    }
}

fn check_inputs(x: &DMatrix<f64>, y: &DVector<f64>, theta: &DVector<f64>) -> Result<()> {
    let (n, p) = x.shape();
    if p == 0 || n < p {
        return Err(BenelError::InvalidInput(format!(
            "design must satisfy n >= p >= 1, got n = {n}, p = {p}"
        )));
    }
    if y.len() != n {
        return Err(BenelError::InvalidInput(format!(
            "response has length {}, design has {n} rows",
            y.len()
        )));
    }
    if theta.len() != p {
        return Err(BenelError::InvalidInput(format!(
            "theta has length {}, design has {p} columns",
            theta.len()
        )));
    }
    if !x.iter().chain(y.iter()).chain(theta.iter()).all(|v| v.is_finite()) {
        return Err(BenelError::InvalidInput("non-finite entry in X, y or theta".into()));
    }
    Ok(())
}

/// Estimating-function matrix: row `i` is `x_i (y_i - x_i' theta)`.
pub fn estimating_functions(x: &DMatrix<f64>, y: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
    let resid = y - x * theta;
    let mut g = x.clone();
    for (i, r) in resid.iter().enumerate() {
        g.row_mut(i).scale_mut(*r);
    }
    g
}

/// Solves the Lagrange multiplier starting from `gamma = 0`.
pub fn solve_lagrange(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    theta: &DVector<f64>,
    cfg: &ElConfig,
) -> Result<ElResult> {
    solve_lagrange_warm(x, y, theta, cfg, None)
}

/// Like [`solve_lagrange`], optionally starting Newton from a previous multiplier.
/// A warm start that puts any denominator below the floor is discarded.
pub fn solve_lagrange_warm(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    theta: &DVector<f64>,
    cfg: &ElConfig,
    warm: Option<&DVector<f64>>,
) -> Result<ElResult> {
    check_inputs(x, y, theta)?;
    let (n, p) = x.shape();
    cfg.validate(n)?;
    let g = estimating_functions(x, y, theta);

    let mut gamma = DVector::zeros(p);
    let mut d = DVector::from_element(n, 1.0);
    if let Some(w) = warm {
        if w.len() != p {
            return Err(BenelError::InvalidInput("warm-start multiplier has wrong length".into()));
        }
        let dw = &g * w;
        if dw.iter().all(|&v| v + 1.0 >= cfg.min_denominator) && w.iter().all(|v| v.is_finite()) {
            gamma.copy_from(w);
            d = dw.add_scalar(1.0);
        }
    }

    let mut dual = d.iter().map(|v| v.ln()).sum::<f64>();
    let mut iters = 0;
    let mut resid_norm;
    let mut converged = false;
    loop {
        let inv_d = d.map(|v| 1.0 / v);
        let resid = g.tr_mul(&inv_d);
        resid_norm = resid.amax();
        if resid_norm <= cfg.newton_tol {
            converged = true;
            break;
        }
        if iters >= cfg.max_newton_iters {
            break;
        }
        iters += 1;

        let mut scaled = g.clone();
        for (i, w) in inv_d.iter().enumerate() {
            scaled.row_mut(i).scale_mut(*w);
        }
        let hess = scaled.tr_mul(&scaled);
        let step = match hess.clone().cholesky() {
            Some(chol) => chol.solve(&resid),
            None => {
                // Rank-deficient curvature: ridge it so the direction stays ascent.
                let ridge = 1e-10 * (1.0 + hess.diagonal().amax());
                match (hess + DMatrix::identity(p, p) * ridge).cholesky() {
                    Some(chol) => chol.solve(&resid),
                    None => resid.clone(),
                }
            }
        };

        let mut t = 1.0;
        let gs = &g * &step;
        loop {
            let cand = d.zip_map(&gs, |di, si| di + t * si);
            if cand.iter().all(|&v| v >= cfg.min_denominator) {
                let cand_dual: f64 = cand.iter().map(|v| v.ln()).sum();
                if cand_dual >= dual - 1e-14 * dual.abs().max(1.0) {
                    gamma.axpy(t, &step, 1.0);
                    d = cand;
                    dual = cand_dual;
                    break;
                }
            }
            t *= 0.5;
            if t < MIN_STEP {
                return Ok(ElResult::infeasible(gamma, d, iters));
            }
        }
    }

    if !converged && resid_norm > INFEASIBLE_RESIDUAL {
        return Ok(ElResult::infeasible(gamma, d, iters));
    }
    // A multiplier escaping to infinity also drives the residual to zero;
    // only a true stationary point has weights summing to one.
    let weight_sum = d.iter().map(|v| 1.0 / v).sum::<f64>() / n as f64;
    if (weight_sum - 1.0).abs() > WEIGHT_SUM_TOL || d.iter().any(|&v| v <= 0.0) {
        return Ok(ElResult::infeasible(gamma, d, iters));
    }

    Ok(ElResult {
        log_el: -dual,
        gamma,
        denominators: d,
        feasible: true,
        newton_iters: iters,
    })
}

/// Gradient of `log_el` with respect to `theta`: `sum_i x_i x_i' gamma / d_i`.
///
/// The multiplier's own dependence on `theta` drops out because the dual is
/// stationary in `gamma` at the solution.
pub fn el_gradient(x: &DMatrix<f64>, el: &ElResult) -> Result<DVector<f64>> {
    if !el.feasible {
        return Err(BenelError::Domain(
            "empirical likelihood gradient requested at an infeasible point".into(),
        ));
    }
    if x.nrows() != el.denominators.len() || x.ncols() != el.gamma.len() {
        return Err(BenelError::InvalidInput("ElResult does not match design shape".into()));
    }
    let xg = x * &el.gamma;
    let w = xg.component_div(&el.denominators);
    Ok(x.tr_mul(&w))
}
