//! Independent oracles shared by the integration tests and the acceptance
//! harness. Nothing here calls into the code paths it is used to check.

#![allow(dead_code)]

use benel::dists::{sample_normal, RngStream};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Moments and CDF of a GIG law by trapezoid quadrature on `x = e^u`.
pub struct GigQuadrature {
    u: Vec<f64>,
    log_w: Vec<f64>,
    log_norm: f64,
    du: f64,
    /// Trapezoid CDF at each grid node.
    cum: Vec<f64>,
}

impl GigQuadrature {
    /// Density proportional to `x^(nu-1) exp(-(chi/x + psi x)/2)`.
    pub fn new(nu: f64, psi: f64, chi: f64) -> Self {
        let h = |u: f64| nu * u - 0.5 * (chi * (-u).exp() + psi * u.exp());
        // Coarse scan for the mode of the integrand in u.
        let (mut best_u, mut best_h) = (0.0, f64::NEG_INFINITY);
        let mut u = -60.0;
        while u <= 60.0 {
            let v = h(u);
            if v > best_h {
                best_h = v;
                best_u = u;
            }
            u += 0.01;
        }
        let cut = best_h - 60.0;
        let mut lo = best_u;
        while h(lo) > cut && lo > -200.0 {
            lo -= 0.05;
        }
        let mut hi = best_u;
        while h(hi) > cut && hi < 200.0 {
            hi += 0.05;
        }
        let m = 40_001;
        let du = (hi - lo) / (m - 1) as f64;
        let u: Vec<f64> = (0..m).map(|i| lo + i as f64 * du).collect();
        let log_w: Vec<f64> = u.iter().map(|&v| h(v)).collect();
        let log_norm = log_sum(&log_w, du);
        let mut cum = vec![0.0; m];
        for i in 1..m {
            let wa = (log_w[i - 1] - log_norm).exp();
            let wb = (log_w[i] - log_norm).exp();
            cum[i] = cum[i - 1] + 0.5 * (wa + wb) * du;
        }
        Self { u, log_w, log_norm, du, cum }
    }

    /// `E[X^k]`.
    pub fn moment(&self, k: f64) -> f64 {
        let lw: Vec<f64> = self.log_w.iter().zip(&self.u).map(|(w, u)| w + k * u).collect();
        (log_sum(&lw, self.du) - self.log_norm).exp()
    }

    pub fn mean(&self) -> f64 {
        self.moment(1.0)
    }

    pub fn variance(&self) -> f64 {
        self.moment(2.0) - self.mean().powi(2)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let lx = x.ln();
        let last = self.u.len() - 1;
        if lx <= self.u[0] {
            return 0.0;
        }
        if lx >= self.u[last] {
            return self.cum[last].min(1.0);
        }
        let i = (((lx - self.u[0]) / self.du) as usize).min(last - 1);
        let wa = (self.log_w[i] - self.log_norm).exp();
        let wb = (self.log_w[i + 1] - self.log_norm).exp();
        let t = lx - self.u[i];
        let wx = wa + t / self.du * (wb - wa);
        (self.cum[i] + 0.5 * (wa + wx) * t).min(1.0)
    }
}

fn log_sum(log_w: &[f64], du: f64) -> f64 {
    let m = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = log_w.len();
    let s: f64 = log_w
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let c = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            c * (w - m).exp()
        })
        .sum();
    m + (s * du).ln()
}

/// Standard error of the mean of a possibly autocorrelated series by
/// non-overlapping batch means.
pub fn batch_means_se(x: &[f64], batches: usize) -> f64 {
    let b = x.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|k| x[k * b..(k + 1) * b].iter().sum::<f64>() / b as f64)
        .collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let v = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (v / batches as f64).sqrt()
}

pub fn mean_and_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// A small EL instance `(x, y, theta)` whose estimating functions have a
/// known strictly positive weight vector `w0` with `sum w0_i g_i = 0`.
pub struct ElInstance {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub theta: DVector<f64>,
    pub w0: DVector<f64>,
}

impl ElInstance {
    pub fn g(&self) -> DMatrix<f64> {
        let r = &self.y - &self.x * &self.theta;
        DMatrix::from_fn(self.x.nrows(), self.x.ncols(), |i, j| self.x[(i, j)] * r[i])
    }
}

/// Random instance with `n` rows and `p` columns, `n >= p + 2`. The last
/// response is chosen so that `w0` balances the estimating functions.
/// `skew` > 1 spreads the weights of `w0`.
pub fn random_el_instance(n: usize, p: usize, skew: f64, rng: &mut RngStream) -> ElInstance {
    loop {
        let x = DMatrix::from_fn(n, p, |_, _| sample_normal(0.0, 1.0, rng).unwrap());
        let theta = DVector::from_fn(p, |_, _| sample_normal(0.0, 1.0, rng).unwrap());
        let mut w0 = DVector::from_fn(n, |_, _| rng.random::<f64>().powf(skew) + 1e-3);
        w0 /= w0.sum();
        let mut y = DVector::from_fn(n, |_, _| sample_normal(0.0, 2.0, rng).unwrap());
        // The last p residuals are solved for so that sum_i w0_i x_i r_i = 0.
        let mut r = &y - &x * &theta;
        let k = n - p;
        let a = DMatrix::from_fn(p, p, |j, m| w0[k + m] * x[(k + m, j)]);
        let rhs = DVector::from_fn(p, |j, _| -(0..k).map(|i| w0[i] * x[(i, j)] * r[i]).sum::<f64>());
        let Some(sol) = a.lu().solve(&rhs) else { continue };
        if sol.iter().any(|v| !v.is_finite() || v.abs() > 50.0) {
            continue;
        }
        for m in 0..p {
            r[k + m] = sol[m];
        }
        y = &x * &theta + &r;
        let inst = ElInstance { x, y, theta, w0 };
        let bal = inst.g().transpose() * &inst.w0;
        if bal.amax() < 1e-10 {
            return inst;
        }
    }
}

/// Maximizes `sum_i log(n w_i)` over the simplex subject to
/// `sum_i w_i g_i = 0`, starting from the feasible interior point `w0`.
/// Damped Newton on coordinates `z` of an orthonormal basis `N` of the
/// constraint null space, `w = w0 + N z`; the objective is concave in `z`.
pub fn primal_log_el(g: &DMatrix<f64>, w0: &DVector<f64>) -> f64 {
    let n = g.nrows();
    let p = g.ncols();
    let mut a = DMatrix::zeros(p + 1, n);
    for i in 0..n {
        for j in 0..p {
            a[(j, i)] = g[(i, j)];
        }
        a[(p, i)] = 1.0;
    }
    // Null space of a: eigenvectors of a^T a with zero eigenvalue.
    let eig = nalgebra::SymmetricEigen::new(a.transpose() * &a);
    let scale = eig.eigenvalues.amax();
    let cols: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k].abs() < 1e-10 * scale).collect();
    let f = |w: &DVector<f64>| w.iter().map(|v| (n as f64 * v).ln()).sum::<f64>();
    if cols.is_empty() {
        return f(w0);
    }
    let basis = DMatrix::from_fn(n, cols.len(), |i, k| eig.eigenvectors[(i, cols[k])]);
    let mut w = w0.clone();
    for _ in 0..200 {
        let inv = w.map(|v| 1.0 / v);
        let grad = basis.transpose() * &inv;
        if grad.amax() < 1e-13 {
            break;
        }
        let weighted = DMatrix::from_fn(n, cols.len(), |i, k| basis[(i, k)] * inv[i] * inv[i]);
        let hess = basis.transpose() * weighted;
        let step = hess.cholesky().expect("negative Hessian is definite").solve(&grad);
        let dir = &basis * step;
        let cur = f(&w);
        let mut t = 1.0;
        loop {
            let cand = &w + &dir * t;
            if cand.iter().all(|v| *v > 0.0) && f(&cand) >= cur - 1e-14 {
                w = cand;
                break;
            }
            t *= 0.5;
            if t < 1e-20 {
                return f(&w);
            }
        }
    }
    f(&w)
}
