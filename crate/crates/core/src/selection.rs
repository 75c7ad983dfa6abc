//! Posterior summaries, the credible-interval and scaled-neighborhood
//! selection rules, and the large-sample normal-approximation diagnostic.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::el::{solve_lagrange, ElConfig};
use crate::{BenelError, Result};

/// Fewest pooled draws accepted by the selection rules.
pub const MIN_SELECTION_DRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionCriterion {
    CredibleInterval,
    ScaledNeighborhood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub included: Vec<bool>,
    pub criterion: SelectionCriterion,
    /// `alpha` or `eta`.
    pub level: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub criterion: SelectionCriterion,
    /// `alpha` for credible intervals, `eta` for the scaled neighborhood.
    pub level: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            criterion: SelectionCriterion::ScaledNeighborhood,
            level: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSummary {
    pub median: f64,
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    /// Posterior probability that `|theta_j| <= sd_j`.
    pub sn_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub coefficients: Vec<CoefficientSummary>,
    pub alpha: f64,
    pub acceptance_rates: Vec<f64>,
    pub rhat: Vec<f64>,
    pub step_size: f64,
}

impl PosteriorSummary {
    pub fn medians(&self) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.median).collect()
    }
}

/// Linear-interpolated sample quantile of sorted data (type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn check_draws(draws: &[Vec<f64>]) -> Result<usize> {
    if draws.len() < MIN_SELECTION_DRAWS {
        return Err(BenelError::InsufficientSample {
            needed: MIN_SELECTION_DRAWS,
            got: draws.len(),
        });
    }
    let p = draws[0].len();
    if p == 0 || draws.iter().any(|d| d.len() != p) {
        return Err(BenelError::InvalidInput("draws must share a nonzero dimension".into()));
    }
    Ok(p)
}

fn sorted_coordinate(draws: &[Vec<f64>], j: usize) -> Vec<f64> {
    let mut v: Vec<f64> = draws.iter().map(|d| d[j]).collect();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn sn_probability(sorted: &[f64]) -> f64 {
    let (_, sd) = mean_sd(sorted);
    sorted.iter().filter(|x| x.abs() <= sd).count() as f64 / sorted.len() as f64
}

fn check_level(level: f64, name: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&level) {
        return Err(BenelError::InvalidInput(format!("{name} must lie in [0, 1], got {level}")));
    }
    Ok(())
}

/// Per-coefficient summaries of pooled draws with `alpha`-level equal-tailed bounds.
pub fn summarize(draws: &[Vec<f64>], alpha: f64) -> Result<Vec<CoefficientSummary>> {
    check_level(alpha, "alpha")?;
    if draws.len() < 2 {
        return Err(BenelError::InsufficientSample { needed: 2, got: draws.len() });
    }
    let p = draws[0].len();
    Ok((0..p)
        .map(|j| {
            let s = sorted_coordinate(draws, j);
            let (mean, sd) = mean_sd(&s);
            CoefficientSummary {
                median: quantile_sorted(&s, 0.5),
                mean,
                sd,
                lower: quantile_sorted(&s, (1.0 - alpha) / 2.0),
                upper: quantile_sorted(&s, (1.0 + alpha) / 2.0),
                sn_probability: sn_probability(&s),
            }
        })
        .collect())
}

/// Includes coefficient j iff the equal-tailed `alpha`-level interval excludes 0.
pub fn select_credible(draws: &[Vec<f64>], alpha: f64) -> Result<SelectionResult> {
    check_level(alpha, "alpha")?;
    let p = check_draws(draws)?;
    let included = (0..p)
        .map(|j| {
            let s = sorted_coordinate(draws, j);
            let lo = quantile_sorted(&s, (1.0 - alpha) / 2.0);
            let hi = quantile_sorted(&s, (1.0 + alpha) / 2.0);
            lo > 0.0 || hi < 0.0
        })
        .collect();
    Ok(SelectionResult {
        included,
        criterion: SelectionCriterion::CredibleInterval,
        level: alpha,
    })
}

/// Excludes coefficient j iff the posterior mass of `|theta_j| <= sd_j` exceeds `eta`.
pub fn select_scaled_neighborhood(draws: &[Vec<f64>], eta: f64) -> Result<SelectionResult> {
    check_level(eta, "eta")?;
    let p = check_draws(draws)?;
    let included = (0..p)
        .map(|j| sn_probability(&sorted_coordinate(draws, j)) <= eta)
        .collect();
    Ok(SelectionResult {
        included,
        criterion: SelectionCriterion::ScaledNeighborhood,
        level: eta,
    })
}

/// Kolmogorov-Smirnov distance between a sample and a continuous CDF.
pub fn ks_distance(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalApprox {
    /// Approximate posterior mean `m`.
    pub mean: Vec<f64>,
    /// Precision `J_n` (row-major).
    pub precision: Vec<Vec<f64>>,
    /// `J_n^{-1}` (row-major); empty when `J_n` is not positive definite.
    pub cov: Vec<Vec<f64>>,
    pub mahalanobis: Vec<f64>,
    /// Upper-tail chi-square probabilities of the Mahalanobis statistics.
    pub pvalue_quartiles: [f64; 3],
    pub ks_distance: f64,
    pub positive_definite: bool,
}

/// Central finite-difference Hessian of `f` at `x`, symmetrized. The step
/// for coordinate j is `1e-4 * (|x_j| + 1e-4)`.
pub fn fd_hessian(f: &mut impl FnMut(&DVector<f64>) -> f64, x: &DVector<f64>) -> DMatrix<f64> {
    let p = x.len();
    let h: Vec<f64> = x.iter().map(|v| 1e-4 * (v.abs() + 1e-4)).collect();
    let f0 = f(x);
    let mut hess = DMatrix::zeros(p, p);
    let shifted = |pairs: &[(usize, f64)]| {
        let mut y = x.clone();
        for &(k, d) in pairs {
            y[k] += d;
        }
        y
    };
    for i in 0..p {
        let fp = f(&shifted(&[(i, h[i])]));
        let fm = f(&shifted(&[(i, -h[i])]));
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let fpp = f(&shifted(&[(i, h[i]), (j, h[j])]));
            let fpm = f(&shifted(&[(i, h[i]), (j, -h[j])]));
            let fmp = f(&shifted(&[(i, -h[i]), (j, h[j])]));
            let fmm = f(&shifted(&[(i, -h[i]), (j, -h[j])]));
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    0.5 * (&hess + hess.transpose())
}

/// Least-squares estimate, the maximizer of the profile EL (where it is 0).
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    if let Some(ch) = xtx.clone().cholesky() {
        return Ok(ch.solve(&xty));
    }
    let ridge = &xtx + DMatrix::identity(x.ncols(), x.ncols()) * 1e-6;
    ridge
        .cholesky()
        .map(|ch| ch.solve(&xty))
        .ok_or_else(|| BenelError::InvalidInput("design is numerically singular".into()))
}

/// Normal approximation with mean `m` and precision `J_n = diag(prior_precision) + J`,
/// `J` the Hessian of the negative profile log-EL at its maximizer. `prior_mode`
/// is the prior mode (zero for the elastic-net prior). Compares the Mahalanobis
/// statistics of `draws` with the chi-square law on `p` degrees of freedom.
pub fn normal_approx_from_parts(
    j_hat: &DMatrix<f64>,
    theta_hat: &DVector<f64>,
    prior_precision: &[f64],
    prior_mode: &DVector<f64>,
    draws: &[Vec<f64>],
) -> Result<NormalApprox> {
    let p = theta_hat.len();
    if prior_precision.len() != p || j_hat.shape() != (p, p) || prior_mode.len() != p {
        return Err(BenelError::InvalidInput("dimension mismatch".into()));
    }
    let d = DMatrix::from_diagonal(&DVector::from_column_slice(prior_precision));
    let jn = &d + j_hat;
    let jn = 0.5 * (&jn + jn.transpose());
    let rhs = &d * prior_mode + j_hat * theta_hat;
    let to_rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
    let chi = ChiSquared::new(p as f64).map_err(|e| BenelError::Domain(e.to_string()))?;
    match jn.clone().cholesky() {
        Some(ch) => {
            let m = ch.solve(&rhs);
            let stats: Vec<f64> = draws
                .iter()
                .map(|t| {
                    let r = DVector::from_column_slice(t) - &m;
                    (r.transpose() * &jn * &r)[(0, 0)]
                })
                .collect();
            let mut pv: Vec<f64> = stats.iter().map(|s| chi.sf(*s)).collect();
            pv.sort_by(|a, b| a.total_cmp(b));
            Ok(NormalApprox {
                mean: m.iter().copied().collect(),
                cov: to_rows(&ch.inverse()),
                precision: to_rows(&jn),
                ks_distance: ks_distance(&stats, |x| chi.cdf(x)),
                pvalue_quartiles: [
                    quantile_sorted(&pv, 0.25),
                    quantile_sorted(&pv, 0.5),
                    quantile_sorted(&pv, 0.75),
                ],
                mahalanobis: stats,
                positive_definite: true,
            })
        }
        None => {
            log::warn!("J_n is not positive definite; normal approximation flagged");
            Ok(NormalApprox {
                mean: vec![f64::NAN; p],
                precision: to_rows(&jn),
                cov: Vec::new(),
                mahalanobis: Vec::new(),
                pvalue_quartiles: [f64::NAN; 3],
                ks_distance: f64::NAN,
                positive_definite: false,
            })
        }
    }
}

/// Normal-approximation diagnostic for BEN-EL draws. `prior_precision[j]` is
/// the posterior-average `(lambda2 / sigma2) * tau_j / (tau_j - 1)`.
pub fn normal_approx_diagnostic(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    draws: &[Vec<f64>],
    prior_precision: &[f64],
) -> Result<NormalApprox> {
    let theta_hat = least_squares(x, y)?;
    let cfg = ElConfig {
        newton_tol: 1e-12,
        ..ElConfig::default()
    };
    let mut neg_log_el = |t: &DVector<f64>| match solve_lagrange(x, y, t, &cfg) {
        Ok(r) if r.feasible => -r.log_el,
        _ => f64::INFINITY,
    };
    let j_hat = fd_hessian(&mut neg_log_el, &theta_hat);
    if !j_hat.iter().all(|v| v.is_finite()) {
        return Err(BenelError::Domain("finite-difference stencil left the EL support".into()));
    }
    let zero = DVector::zeros(theta_hat.len());
    normal_approx_from_parts(&j_hat, &theta_hat, prior_precision, &zero, draws)
}
