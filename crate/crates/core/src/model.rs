//! The hierarchical elastic-net model on the profile empirical likelihood:
//! potential energy for `theta`, Gibbs conditionals for the latent scales and
//! `sigma^2`, full-Bayes penalty conditionals, and Monte Carlo EM for the
//! empirical-Bayes penalties.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dists::{sample_gamma, sample_gig, sample_inverse_gamma, GigParams, RngStream};
use crate::el::{el_gradient, solve_lagrange, solve_lagrange_warm, ElConfig, ElResult};
use crate::hmc::{bisection_tune, hmc_step, split_rhat, ChainSet, HmcConfig, Potential, TunerConfig, TunerOutcome,
    CHAIN_STREAM_BASE};
use crate::selection::{
    least_squares, select_credible, select_scaled_neighborhood, summarize, PosteriorSummary, SelectionConfig,
    SelectionCriterion, SelectionResult,
};
use crate::{BenelError, Result};

/// Floor on the stored `tau_j - 1`.
pub const TAU_EXCESS_FLOOR: f64 = 1e-12;

/// Split-R-hat below this value declares convergence.
pub const RHAT_THRESHOLD: f64 = 1.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub theta: DVector<f64>,
    /// `tau_j - 1`, kept at or above [`TAU_EXCESS_FLOOR`].
    pub tau_excess: DVector<f64>,
    pub sigma2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl ModelState {
    pub fn new(theta: DVector<f64>, tau: &DVector<f64>, sigma2: f64, lambda1: f64, lambda2: f64) -> Result<Self> {
        let s = Self {
            tau_excess: tau.map(|t| t - 1.0),
            theta,
            sigma2,
            lambda1,
            lambda2,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn p(&self) -> usize {
        self.theta.len()
    }

    pub fn tau(&self) -> DVector<f64> {
        self.tau_excess.add_scalar(1.0)
    }

    /// `tau_j / (tau_j - 1)`.
    pub fn d_tau(&self) -> DVector<f64> {
        self.tau_excess.map(|e| 1.0 + 1.0 / e)
    }

    /// Diagonal prior precision of `theta`: `(lambda2 / sigma2) tau_j / (tau_j - 1)`.
    pub fn prior_precision(&self) -> DVector<f64> {
        self.d_tau() * (self.lambda2 / self.sigma2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau_excess.len() != self.p() {
            return Err(BenelError::InvalidInput("theta and tau lengths differ".into()));
        }
        if self.tau_excess.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(BenelError::InvalidInput("every tau_j must be finite and exceed 1".into()));
        }
        for (name, v) in [("sigma2", self.sigma2), ("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(BenelError::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        if self.theta.iter().any(|t| !t.is_finite()) {
            return Err(BenelError::InvalidInput("theta must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lambda2Prior {
    Gig,
    Gamma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub a: f64,
    pub b: f64,
    pub r1: f64,
    pub delta1: f64,
    pub nu2: f64,
    pub psi2: f64,
    pub chi2: f64,
    pub lambda2_prior: Lambda2Prior,
    pub r2: f64,
    pub delta2: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            a: 10.0,
            b: 10.0,
            r1: 1.0,
            delta1: 1.0,
            nu2: 1.0,
            psi2: 1.0,
            chi2: 1.0,
            lambda2_prior: Lambda2Prior::Gig,
            r2: 1.0,
            delta2: 1.0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("a", self.a), ("b", self.b), ("r1", self.r1), ("delta1", self.delta1)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(BenelError::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        match self.lambda2_prior {
            Lambda2Prior::Gig => GigParams::new(self.nu2, self.psi2, self.chi2).map(|_| ()),
            Lambda2Prior::Gamma => {
                if !(self.r2 > 0.0 && self.delta2 >= 0.0 && self.r2.is_finite() && self.delta2.is_finite()) {
                    return Err(BenelError::InvalidInput(format!(
                        "gamma prior on lambda2 needs r2 > 0 and delta2 >= 0, got ({}, {})",
                        self.r2, self.delta2
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Potential energy of `theta` given the rest of the state: the negative
/// profile log-EL plus the Gaussian prior term. Caches the last multiplier to
/// warm-start the next solve.
#[derive(Debug, Clone)]
pub struct BenElPotential<'a> {
    data: &'a Dataset,
    precision: DVector<f64>,
    el: ElConfig,
    warm: Option<DVector<f64>>,
}

impl<'a> BenElPotential<'a> {
    pub fn new(data: &'a Dataset, state: &ModelState, el: ElConfig) -> Self {
        Self {
            data,
            precision: state.prior_precision(),
            el,
            warm: None,
        }
    }

    pub fn with_warm_start(mut self, gamma: Option<DVector<f64>>) -> Self {
        self.warm = gamma;
        self
    }

    pub fn take_warm_start(&mut self) -> Option<DVector<f64>> {
        self.warm.take()
    }

    fn solve(&mut self, theta: &DVector<f64>) -> Option<ElResult> {
        let warm = self.warm.as_ref().filter(|g| g.len() == theta.len());
        let mut r = solve_lagrange_warm(&self.data.x, &self.data.y, theta, &self.el, warm).ok()?;
        if !r.feasible && warm.is_some() {
            r = solve_lagrange(&self.data.x, &self.data.y, theta, &self.el).ok()?;
        }
        if r.feasible {
            self.warm = Some(r.gamma.clone());
            Some(r)
        } else {
            None
        }
    }
}

fn prior_term(precision: &DVector<f64>, theta: &DVector<f64>) -> f64 {
    0.5 * precision.iter().zip(theta.iter()).map(|(d, t)| d * t * t).sum::<f64>()
}

impl Potential for BenElPotential<'_> {
    fn dim(&self) -> usize {
        self.data.p()
    }

    fn value_and_gradient(&mut self, theta: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        let r = self.solve(theta)?;
        let g = el_gradient(&self.data.x, &r).ok()?;
        let u = -r.log_el + prior_term(&self.precision, theta);
        Some((u, self.precision.component_mul(theta) - g))
    }

    fn value(&mut self, theta: &DVector<f64>) -> f64 {
        match self.solve(theta) {
            Some(r) => -r.log_el + prior_term(&self.precision, theta),
            None => f64::INFINITY,
        }
    }
}

/// `-log EL(theta) + (lambda2 / 2 sigma2) sum_j tau_j/(tau_j - 1) theta_j^2`;
/// `+inf` outside the EL support.
pub fn potential(theta: &DVector<f64>, state: &ModelState, data: &Dataset) -> Result<f64> {
    check_dims(theta, state, data)?;
    let r = solve_lagrange(&data.x, &data.y, theta, &ElConfig::default())?;
    if !r.feasible {
        return Ok(f64::INFINITY);
    }
    Ok(-r.log_el + prior_term(&state.prior_precision(), theta))
}

pub fn potential_gradient(theta: &DVector<f64>, state: &ModelState, data: &Dataset) -> Result<DVector<f64>> {
    check_dims(theta, state, data)?;
    let r = solve_lagrange(&data.x, &data.y, theta, &ElConfig::default())?;
    let g = el_gradient(&data.x, &r)?;
    Ok(state.prior_precision().component_mul(theta) - g)
}

fn check_dims(theta: &DVector<f64>, state: &ModelState, data: &Dataset) -> Result<()> {
    if theta.len() != data.p() || state.p() != data.p() {
        return Err(BenelError::InvalidInput(format!(
            "theta has length {}, state {}, data {} columns",
            theta.len(),
            state.p(),
            data.p()
        )));
    }
    Ok(())
}

/// Draws `tau - 1` from its conditional GIG law, floored at
/// [`TAU_EXCESS_FLOOR`]. Returns the draws and the number of clamped entries.
pub fn gibbs_tau_excess(state: &ModelState, rng: &mut RngStream) -> Result<(DVector<f64>, usize)> {
    let psi = state.lambda1 * state.lambda1 / (4.0 * state.lambda2 * state.sigma2);
    let mut clamped = 0;
    let mut out = DVector::zeros(state.p());
    for (j, t) in state.theta.iter().enumerate() {
        let chi = state.lambda2 * t * t / state.sigma2;
        let e = sample_gig(GigParams::new(0.5, psi, chi)?, rng)?;
        out[j] = if e < TAU_EXCESS_FLOOR {
            clamped += 1;
            TAU_EXCESS_FLOOR
        } else {
            e
        };
    }
    Ok((out, clamped))
}

/// One draw of `tau` from its full conditional.
pub fn gibbs_tau(state: &ModelState, rng: &mut RngStream) -> Result<DVector<f64>> {
    Ok(gibbs_tau_excess(state, rng)?.0.add_scalar(1.0))
}

/// Shape and scale of the inverse-gamma conditional of `sigma^2`.
pub fn sigma2_conditional(state: &ModelState, hyper: &Hyperparams) -> (f64, f64) {
    let p = state.p() as f64;
    let ratio = state.lambda1 * state.lambda1 / (4.0 * state.lambda2);
    let s: f64 = state
        .theta
        .iter()
        .zip(state.tau_excess.iter())
        .map(|(t, e)| state.lambda2 * (1.0 + 1.0 / e) * t * t + ratio * (1.0 + e))
        .sum();
    (hyper.a + p, hyper.b + 0.5 * s)
}

pub fn gibbs_sigma2(state: &ModelState, hyper: &Hyperparams, rng: &mut RngStream) -> Result<f64> {
    let (shape, scale) = sigma2_conditional(state, hyper);
    sample_inverse_gamma(shape, scale, rng)
}

/// Shape and rate of the gamma conditional of `lambda1^2`.
pub fn lambda1_sq_conditional(state: &ModelState, hyper: &Hyperparams) -> (f64, f64) {
    let p = state.p() as f64;
    let tau_sum: f64 = state.tau_excess.iter().map(|e| 1.0 + e).sum();
    (p / 2.0 + hyper.r1, tau_sum / (8.0 * state.lambda2 * state.sigma2) + hyper.delta1)
}

/// GIG conditional of `lambda2` at the given `lambda1`.
pub fn lambda2_conditional(state: &ModelState, lambda1: f64, hyper: &Hyperparams) -> Result<GigParams> {
    let quad: f64 = state
        .theta
        .iter()
        .zip(state.tau_excess.iter())
        .map(|(t, e)| (1.0 + 1.0 / e) * t * t)
        .sum::<f64>()
        / state.sigma2;
    let tau_sum: f64 = state.tau_excess.iter().map(|e| 1.0 + e).sum();
    let chi_base = tau_sum * lambda1 * lambda1 / (4.0 * state.sigma2);
    match hyper.lambda2_prior {
        Lambda2Prior::Gig => GigParams::new(hyper.nu2, quad + hyper.psi2, chi_base + hyper.chi2),
        Lambda2Prior::Gamma => GigParams::new(hyper.r2, quad + 2.0 * hyper.delta2, chi_base),
    }
}

/// Full-Bayes draws of `(lambda1, lambda2)`: `lambda1^2` first, then
/// `lambda2` given the new `lambda1`.
pub fn fb_lambda_updates(state: &ModelState, hyper: &Hyperparams, rng: &mut RngStream) -> Result<(f64, f64)> {
    let (shape, rate) = lambda1_sq_conditional(state, hyper);
    let lambda1 = sample_gamma(shape, rate, rng)?.sqrt();
    let lambda2 = sample_gig(lambda2_conditional(state, lambda1, hyper)?, rng)?;
    Ok((lambda1, lambda2))
}

/// Monte Carlo expectations feeding the EM update:
/// `a = sum_j E[tau_j / sigma2]`, `b = sum_j E[tau_j/(tau_j - 1) theta_j^2 / sigma2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmExpectations {
    pub a: f64,
    pub b: f64,
}

/// The part of the expected complete-data log posterior that depends on the penalties.
pub fn em_objective(lambda1: f64, lambda2: f64, e: &EmExpectations, p: usize) -> f64 {
    p as f64 * lambda1.ln() - 0.5 * lambda2 * e.b - lambda1 * lambda1 * e.a / (8.0 * lambda2)
}

/// `(dR/dlambda1, dR/dlambda2)`.
pub fn em_objective_gradient(lambda1: f64, lambda2: f64, e: &EmExpectations, p: usize) -> (f64, f64) {
    (
        p as f64 / lambda1 - lambda1 * e.a / (4.0 * lambda2),
        -0.5 * e.b + lambda1 * lambda1 * e.a / (8.0 * lambda2 * lambda2),
    )
}

/// Maximizer of [`em_objective`]: `lambda2 = p / b`, `lambda1 = 2p / sqrt(a b)`.
pub fn em_update(e: &EmExpectations, p: usize) -> Result<(f64, f64)> {
    if p == 0 {
        return Err(BenelError::InvalidInput("p must be positive".into()));
    }
    if !(e.b > 0.0) || !e.b.is_finite() {
        return Err(BenelError::DegenerateExpectation(format!(
            "E-step estimate of sum E[tau/(tau-1) theta^2/sigma2] is {}; lengthen the inner chain",
            e.b
        )));
    }
    if !(e.a > 0.0) || !e.a.is_finite() {
        return Err(BenelError::DegenerateExpectation(format!(
            "E-step estimate of sum E[tau/sigma2] is {}; lengthen the inner chain",
            e.a
        )));
    }
    let p = p as f64;
    Ok((2.0 * p / (e.a * e.b).sqrt(), p / e.b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Penalties estimated by Monte Carlo EM.
    Eb,
    /// Penalties sampled under their priors.
    Fb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub chains: usize,
    /// Iterations per production chain, burn-in included.
    pub chain_length: usize,
    pub burnin: usize,
    pub leapfrog_steps: usize,
    pub tuner: TunerConfig,
    /// Skips tuning when set.
    pub step_size: Option<f64>,
    /// Production acceptance outside this range triggers one retune and rerun.
    pub acceptance_guard: (f64, f64),
    pub el: ElConfig,
    /// Level of the reported equal-tailed intervals.
    pub interval_level: f64,
    pub selection: SelectionConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            chain_length: 2000,
            burnin: 1000,
            leapfrog_steps: 10,
            tuner: TunerConfig::default(),
            step_size: None,
            acceptance_guard: (0.4, 0.9),
            el: ElConfig::default(),
            interval_level: 0.95,
            selection: SelectionConfig::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(BenelError::InvalidInput("need at least one chain".into()));
        }
        if self.burnin >= self.chain_length {
            return Err(BenelError::InvalidInput(format!(
                "burn-in ({}) must be shorter than the chain ({})",
                self.burnin, self.chain_length
            )));
        }
        if self.leapfrog_steps == 0 {
            return Err(BenelError::InvalidInput("leapfrog steps must be at least 1".into()));
        }
        if let Some(w) = self.step_size {
            if !(w > 0.0 && w.is_finite()) {
                return Err(BenelError::InvalidInput(format!("step size must be positive, got {w}")));
            }
        }
        if !(0.0..=1.0).contains(&self.interval_level) || !(0.0..=1.0).contains(&self.selection.level) {
            return Err(BenelError::InvalidInput("interval and selection levels must lie in [0, 1]".into()));
        }
        self.tuner.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    pub inner_length: usize,
    pub inner_burnin: usize,
    pub rel_tol: f64,
    /// Consecutive iterations below `rel_tol` required to stop.
    pub patience: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 20,
            inner_length: 1000,
            inner_burnin: 500,
            rel_tol: 1e-2,
            patience: 2,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.inner_burnin >= self.inner_length || !(self.rel_tol > 0.0) || self.patience == 0 {
            return Err(BenelError::InvalidInput(
                "EM needs max_iters >= 1, inner burn-in shorter than the inner chain, rel_tol > 0, patience >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmIterationStats {
    pub acceptance_rate: f64,
    pub max_rhat: f64,
    pub expectations: EmExpectations,
    /// `sum_j E[tau_j] / E[sigma2]` and `sum_j E[tau_j/(tau_j-1) theta_j^2] / E[sigma2]`.
    pub ratio_of_means: EmExpectations,
    /// `R(new) - R(old)` under this iteration's expectations.
    pub r_improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    /// Starting values first.
    pub lambda1_path: Vec<f64>,
    pub lambda2_path: Vec<f64>,
    pub rel_change: Vec<f64>,
    pub inner_chain_stats: Vec<EmIterationStats>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub mode: FitMode,
    pub names: Vec<String>,
    pub summary: PosteriorSummary,
    pub selection: SelectionResult,
    pub max_rhat: f64,
    /// Every coordinate of `theta` has split-R-hat below [`RHAT_THRESHOLD`].
    pub converged: bool,
    pub tuner: Option<TunerOutcome>,
    /// Production acceptance left the guard range and the sampler was retuned.
    pub retuned: bool,
    pub step_size: f64,
    /// Fixed values (EB) or posterior medians (FB).
    pub lambda1: f64,
    pub lambda2: f64,
    pub theta_draws: ChainSet,
    pub sigma2_draws: Vec<Vec<f64>>,
    pub lambda1_draws: Vec<Vec<f64>>,
    pub lambda2_draws: Vec<Vec<f64>>,
    /// Posterior mean of `(lambda2 / sigma2) tau_j / (tau_j - 1)`.
    pub prior_precision_mean: Vec<f64>,
    pub tau_clamped: usize,
}

impl FitReport {
    pub fn medians(&self) -> Vec<f64> {
        self.summary.medians()
    }
}

/// Least-squares coefficients, `tau = 2`, residual mean square for `sigma2`,
/// unit penalties.
pub fn initial_state(data: &Dataset) -> Result<ModelState> {
    let (n, p) = (data.n(), data.p());
    if n <= p {
        return Err(BenelError::InsufficientSample { needed: p + 1, got: n });
    }
    let theta = least_squares(&data.x, &data.y)?;
    let rss = (&data.y - &data.x * &theta).norm_squared();
    let sigma2 = (rss / (n - p) as f64).max(1e-8);
    ModelState::new(theta, &DVector::from_element(p, 2.0), sigma2, 1.0, 1.0)
}

/// Mutable state of one HMC-within-Gibbs chain.
#[derive(Debug, Clone)]
pub struct GibbsChain {
    pub state: ModelState,
    warm: Option<DVector<f64>>,
    pub clamped: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SweepOutcome {
    pub accepted: bool,
    pub left_support: bool,
}

impl GibbsChain {
    pub fn new(state: ModelState) -> Self {
        Self {
            state,
            warm: None,
            clamped: 0,
        }
    }

    /// One sweep: an HMC update of `theta`, then `tau`, `sigma2` and, in
    /// full-Bayes mode, `lambda1` and `lambda2`.
    pub fn sweep(
        &mut self,
        data: &Dataset,
        hyper: &Hyperparams,
        mode: FitMode,
        hmc: &HmcConfig,
        el: &ElConfig,
        rng: &mut RngStream,
    ) -> Result<SweepOutcome> {
        let mut pot = BenElPotential::new(data, &self.state, *el).with_warm_start(self.warm.take());
        let tr = hmc_step(&self.state.theta, &mut pot, hmc, rng)?;
        self.warm = pot.take_warm_start();
        self.state.theta = tr.position;
        let (excess, clamped) = gibbs_tau_excess(&self.state, rng)?;
        self.state.tau_excess = excess;
        self.clamped += clamped;
        self.state.sigma2 = gibbs_sigma2(&self.state, hyper, rng)?;
        if mode == FitMode::Fb {
            let (l1, l2) = fb_lambda_updates(&self.state, hyper, rng)?;
            self.state.lambda1 = l1;
            self.state.lambda2 = l2;
        }
        Ok(SweepOutcome {
            accepted: tr.accepted,
            left_support: tr.left_support,
        })
    }
}

/// Post-burn-in output of one Gibbs chain.
#[derive(Debug, Clone, Default)]
pub struct ChainRun {
    pub theta: Vec<Vec<f64>>,
    pub sigma2: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub accepted: usize,
    pub kept: usize,
    pub left_support: usize,
    /// Running sums over kept sweeps.
    pub precision_sum: Vec<f64>,
    pub tau_over_sigma2_sum: Vec<f64>,
    pub b_terms_sum: Vec<f64>,
    pub tau_sum: Vec<f64>,
    pub quad_sum: Vec<f64>,
    pub sigma2_sum: f64,
}

impl ChainRun {
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.kept.max(1) as f64
    }

    fn record(&mut self, s: &ModelState) {
        let p = s.p();
        if self.precision_sum.is_empty() {
            for v in [
                &mut self.precision_sum,
                &mut self.tau_over_sigma2_sum,
                &mut self.b_terms_sum,
                &mut self.tau_sum,
                &mut self.quad_sum,
            ] {
                *v = vec![0.0; p];
            }
        }
        self.theta.push(s.theta.iter().copied().collect());
        self.sigma2.push(s.sigma2);
        self.lambda1.push(s.lambda1);
        self.lambda2.push(s.lambda2);
        self.sigma2_sum += s.sigma2;
        for j in 0..p {
            let e = s.tau_excess[j];
            let tau = 1.0 + e;
            let quad = (1.0 + 1.0 / e) * s.theta[j] * s.theta[j];
            self.precision_sum[j] += s.lambda2 / s.sigma2 * (1.0 + 1.0 / e);
            self.tau_over_sigma2_sum[j] += tau / s.sigma2;
            self.b_terms_sum[j] += quad / s.sigma2;
            self.tau_sum[j] += tau;
            self.quad_sum[j] += quad;
        }
    }

    fn em_expectations(&self) -> (EmExpectations, EmExpectations) {
        let k = self.kept.max(1) as f64;
        let sigma2_mean = self.sigma2_sum / k;
        (
            EmExpectations {
                a: self.tau_over_sigma2_sum.iter().sum::<f64>() / k,
                b: self.b_terms_sum.iter().sum::<f64>() / k,
            },
            EmExpectations {
                a: self.tau_sum.iter().sum::<f64>() / k / sigma2_mean,
                b: self.quad_sum.iter().sum::<f64>() / k / sigma2_mean,
            },
        )
    }
}

/// Runs `length` sweeps of `chain`, keeping those after `burnin`.
#[allow(clippy::too_many_arguments)]
pub fn run_gibbs(
    chain: &mut GibbsChain,
    data: &Dataset,
    hyper: &Hyperparams,
    mode: FitMode,
    hmc: &HmcConfig,
    el: &ElConfig,
    length: usize,
    burnin: usize,
    rng: &mut RngStream,
) -> Result<ChainRun> {
    let mut run = ChainRun::default();
    for it in 0..length {
        let out = chain.sweep(data, hyper, mode, hmc, el, rng)?;
        if it >= burnin {
            run.kept += 1;
            run.accepted += out.accepted as usize;
            run.left_support += out.left_support as usize;
            run.record(&chain.state);
        }
    }
    Ok(run)
}

/// Bisection tuning of the HMC step size inside the Gibbs sampler; the
/// chain carries over between tuning runs.
pub fn tune_gibbs(
    chain: &mut GibbsChain,
    data: &Dataset,
    hyper: &Hyperparams,
    mode: FitMode,
    cfg: &SamplerConfig,
    initial_step: f64,
    rng: &mut RngStream,
) -> Result<TunerOutcome> {
    let tcfg = TunerConfig {
        initial_step,
        ..cfg.tuner.clone()
    };
    bisection_tune(&tcfg, |omega| {
        let hmc = HmcConfig::identity(data.p(), omega, cfg.leapfrog_steps);
        let run = run_gibbs(
            chain,
            data,
            hyper,
            mode,
            &hmc,
            &cfg.el,
            tcfg.tuning_chain_length,
            tcfg.tuning_burnin,
            rng,
        )?;
        log::debug!("tuning omega = {omega:.5}: acceptance {:.3}", run.acceptance_rate());
        Ok(run.acceptance_rate())
    })
}

/// Stream ids used by the fitting procedures, below [`CHAIN_STREAM_BASE`].
const TUNER_STREAM: u64 = 1;
const EM_STREAM: u64 = 2;
const RETUNE_STREAM: u64 = 3;
const RERUN_STREAM_OFFSET: u64 = 1000;

#[allow(clippy::too_many_arguments)]
fn run_production(
    data: &Dataset,
    hyper: &Hyperparams,
    mode: FitMode,
    cfg: &SamplerConfig,
    init: &ModelState,
    step_size: f64,
    seed: u64,
    stream_offset: u64,
) -> Result<(Vec<ChainRun>, Vec<u64>, usize)> {
    let hmc = HmcConfig::identity(data.p(), step_size, cfg.leapfrog_steps);
    let ids: Vec<u64> = (0..cfg.chains as u64).map(|c| CHAIN_STREAM_BASE + stream_offset + c).collect();
    let runs: Vec<Result<(ChainRun, usize)>> = ids
        .par_iter()
        .map(|&sid| {
            let mut rng = RngStream::new(seed, sid);
            let mut chain = GibbsChain::new(init.clone());
            let run = run_gibbs(
                &mut chain,
                data,
                hyper,
                mode,
                &hmc,
                &cfg.el,
                cfg.chain_length,
                cfg.burnin,
                &mut rng,
            )?;
            Ok((run, chain.clamped))
        })
        .collect();
    let mut out = Vec::with_capacity(runs.len());
    let mut clamped = 0;
    for r in runs {
        let (run, c) = r?;
        clamped += c;
        out.push(run);
    }
    Ok((out, ids, clamped))
}

fn mean_acceptance(runs: &[ChainRun]) -> f64 {
    runs.iter().map(ChainRun::acceptance_rate).sum::<f64>() / runs.len() as f64
}

/// Production sampling with one retune-and-rerun if acceptance leaves the guard range.
#[allow(clippy::too_many_arguments)]
fn production_with_guard(
    data: &Dataset,
    hyper: &Hyperparams,
    mode: FitMode,
    cfg: &SamplerConfig,
    init: &ModelState,
    step_size: f64,
    seed: u64,
    tuner: &mut Option<TunerOutcome>,
) -> Result<(Vec<ChainRun>, Vec<u64>, usize, f64, bool)> {
    let (runs, ids, clamped) = run_production(data, hyper, mode, cfg, init, step_size, seed, 0)?;
    let rate = mean_acceptance(&runs);
    let (lo, hi) = cfg.acceptance_guard;
    if (lo..=hi).contains(&rate) || cfg.step_size.is_some() {
        return Ok((runs, ids, clamped, step_size, false));
    }
    log::warn!("production acceptance {rate:.3} outside [{lo}, {hi}]; retuning once");
    let mut chain = GibbsChain::new(init.clone());
    let mut rng = RngStream::new(seed, RETUNE_STREAM);
    let outcome = tune_gibbs(&mut chain, data, hyper, mode, cfg, step_size, &mut rng)?;
    let omega = outcome.step_size;
    *tuner = Some(outcome);
    let (runs, ids, clamped) =
        run_production(data, hyper, mode, cfg, &chain.state, omega, seed, RERUN_STREAM_OFFSET)?;
    Ok((runs, ids, clamped, omega, true))
}

#[allow(clippy::too_many_arguments)]
fn assemble_report(
    data: &Dataset,
    mode: FitMode,
    cfg: &SamplerConfig,
    runs: Vec<ChainRun>,
    stream_ids: Vec<u64>,
    clamped: usize,
    step_size: f64,
    tuner: Option<TunerOutcome>,
    retuned: bool,
    lambdas: (f64, f64),
    seed: u64,
) -> Result<FitReport> {
    let p = data.p();
    let acceptance_rates: Vec<f64> = runs.iter().map(ChainRun::acceptance_rate).collect();
    let theta_draws = ChainSet {
        draws: runs.iter().map(|r| r.theta.clone()).collect(),
        acceptance_rates: acceptance_rates.clone(),
        seed,
        stream_ids,
        burnin: cfg.burnin,
    };
    if runs.len() == 1 {
        log::warn!("split-R-hat needs at least 2 chains; using the two halves of the single chain");
    }
    let rhat = split_rhat(&theta_draws.draws)?;
    let max_rhat = rhat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let converged = rhat.iter().all(|r| *r < RHAT_THRESHOLD);
    if !converged {
        log::warn!("split-R-hat {max_rhat:.4} >= {RHAT_THRESHOLD}; chains have not converged");
    }
    let pooled = theta_draws.pooled();
    let coefficients = summarize(&pooled, cfg.interval_level)?;
    let selection = match cfg.selection.criterion {
        SelectionCriterion::CredibleInterval => select_credible(&pooled, cfg.selection.level)?,
        SelectionCriterion::ScaledNeighborhood => select_scaled_neighborhood(&pooled, cfg.selection.level)?,
    };
    let total: usize = runs.iter().map(|r| r.kept).sum();
    let prior_precision_mean = (0..p)
        .map(|j| runs.iter().map(|r| r.precision_sum[j]).sum::<f64>() / total as f64)
        .collect();
    let (lambda1, lambda2) = match mode {
        FitMode::Eb => lambdas,
        FitMode::Fb => {
            let l1: Vec<f64> = runs.iter().flat_map(|r| r.lambda1.iter().copied()).collect();
            let l2: Vec<f64> = runs.iter().flat_map(|r| r.lambda2.iter().copied()).collect();
            (crate::data::median(&l1), crate::data::median(&l2))
        }
    };
    Ok(FitReport {
        mode,
        names: data.names.clone(),
        summary: PosteriorSummary {
            coefficients,
            alpha: cfg.interval_level,
            acceptance_rates,
            rhat,
            step_size,
        },
        selection,
        max_rhat,
        converged,
        tuner,
        retuned,
        step_size,
        lambda1,
        lambda2,
        sigma2_draws: runs.iter().map(|r| r.sigma2.clone()).collect(),
        lambda1_draws: runs.iter().map(|r| r.lambda1.clone()).collect(),
        lambda2_draws: runs.iter().map(|r| r.lambda2.clone()).collect(),
        theta_draws,
        prior_precision_mean,
        tau_clamped: clamped,
    })
}

fn initial_tuning(
    chain: &mut GibbsChain,
    data: &Dataset,
    hyper: &Hyperparams,
    mode: FitMode,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<(f64, Option<TunerOutcome>)> {
    if let Some(w) = cfg.step_size {
        return Ok((w, None));
    }
    let mut rng = RngStream::new(seed, TUNER_STREAM);
    let out = tune_gibbs(chain, data, hyper, mode, cfg, cfg.tuner.initial_step, &mut rng)?;
    Ok((out.step_size, Some(out)))
}

/// Empirical-Bayes fit: tune, Monte Carlo EM for the penalties, retune at
/// the estimated penalties, then production chains.
pub fn fit_eb(
    data: &Dataset,
    hyper: &Hyperparams,
    cfg: &SamplerConfig,
    em: &EmConfig,
    seed: u64,
) -> Result<(FitReport, EmTrace)> {
    hyper.validate()?;
    cfg.validate()?;
    em.validate()?;
    let p = data.p();
    let mut chain = GibbsChain::new(initial_state(data)?);
    let (mut omega, mut tuner) = initial_tuning(&mut chain, data, hyper, FitMode::Eb, cfg, seed)?;

    let mut trace = EmTrace {
        lambda1_path: vec![chain.state.lambda1],
        lambda2_path: vec![chain.state.lambda2],
        rel_change: Vec::new(),
        inner_chain_stats: Vec::new(),
        converged: false,
    };
    let mut rng = RngStream::new(seed, EM_STREAM);
    let mut calm = 0;
    for k in 0..em.max_iters {
        let hmc = HmcConfig::identity(p, omega, cfg.leapfrog_steps);
        let run = run_gibbs(
            &mut chain,
            data,
            hyper,
            FitMode::Eb,
            &hmc,
            &cfg.el,
            em.inner_length,
            em.inner_burnin,
            &mut rng,
        )?;
        let (exp, ratio) = run.em_expectations();
        let (old1, old2) = (chain.state.lambda1, chain.state.lambda2);
        let (new1, new2) = em_update(&exp, p)?;
        let improvement = em_objective(new1, new2, &exp, p) - em_objective(old1, old2, &exp, p);
        let rel = ((new1 - old1) / old1).abs().max(((new2 - old2) / old2).abs());
        let max_rhat = split_rhat(std::slice::from_ref(&run.theta))?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        log::info!(
            "EM {}: lambda1 {new1:.5} lambda2 {new2:.5} rel {rel:.4} acc {:.3} (ratio-of-means lambda {:?})",
            k + 1,
            run.acceptance_rate(),
            em_update(&ratio, p).ok()
        );
        trace.inner_chain_stats.push(EmIterationStats {
            acceptance_rate: run.acceptance_rate(),
            max_rhat,
            expectations: exp,
            ratio_of_means: ratio,
            r_improvement: improvement,
        });
        trace.lambda1_path.push(new1);
        trace.lambda2_path.push(new2);
        trace.rel_change.push(rel);
        chain.state.lambda1 = new1;
        chain.state.lambda2 = new2;
        calm = if rel < em.rel_tol { calm + 1 } else { 0 };
        if calm >= em.patience {
            trace.converged = true;
            break;
        }
    }
    if !trace.converged {
        log::warn!("EM stopped after {} iterations without meeting the tolerance", em.max_iters);
    }

    if cfg.step_size.is_none() {
        let mut rng = RngStream::new(seed, RETUNE_STREAM);
        let out = tune_gibbs(&mut chain, data, hyper, FitMode::Eb, cfg, omega, &mut rng)?;
        omega = out.step_size;
        tuner = Some(out);
    }
    let lambdas = (chain.state.lambda1, chain.state.lambda2);
    let (runs, ids, clamped, omega, retuned) =
        production_with_guard(data, hyper, FitMode::Eb, cfg, &chain.state, omega, seed, &mut tuner)?;
    let report = assemble_report(
        data,
        FitMode::Eb,
        cfg,
        runs,
        ids,
        clamped + chain.clamped,
        omega,
        tuner,
        retuned,
        lambdas,
        seed,
    )?;
    Ok((report, trace))
}

/// Full-Bayes fit: tune at the initial penalties, then production chains
/// that also sample the penalties.
pub fn fit_fb(data: &Dataset, hyper: &Hyperparams, cfg: &SamplerConfig, seed: u64) -> Result<FitReport> {
    hyper.validate()?;
    cfg.validate()?;
    let mut chain = GibbsChain::new(initial_state(data)?);
    let (omega, mut tuner) = initial_tuning(&mut chain, data, hyper, FitMode::Fb, cfg, seed)?;
    let (runs, ids, clamped, omega, retuned) =
        production_with_guard(data, hyper, FitMode::Fb, cfg, &chain.state, omega, seed, &mut tuner)?;
    assemble_report(
        data,
        FitMode::Fb,
        cfg,
        runs,
        ids,
        clamped + chain.clamped,
        omega,
        tuner,
        retuned,
        (f64::NAN, f64::NAN),
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sim1, standardize, ErrorLaw};
    use nalgebra::DMatrix;

    fn small_data(seed: u64, n: usize) -> Dataset {
        let mut rng = RngStream::new(seed, 0);
        let (train, _, _) = generate_sim1(n, ErrorLaw::Normal { sd: 3.0 }, &mut rng).unwrap();
        standardize(&train).unwrap()
    }

    fn state_for(data: &Dataset, seed: u64) -> ModelState {
        let mut rng = RngStream::new(seed, 1);
        let mut s = initial_state(data).unwrap();
        for j in 0..data.p() {
            s.theta[j] += sample_gamma(2.0, 4.0, &mut rng).unwrap() - 0.5;
            s.tau_excess[j] = sample_gamma(1.0, 1.0, &mut rng).unwrap() + 0.05;
        }
        s.sigma2 = 0.5 + sample_gamma(2.0, 2.0, &mut rng).unwrap();
        s.lambda2 = 0.2 + sample_gamma(2.0, 2.0, &mut rng).unwrap();
        s
    }

    #[test]
    fn potential_at_least_squares_with_vanishing_ridge_is_zero() {
        let data = small_data(1, 40);
        let mut s = initial_state(&data).unwrap();
        s.lambda2 = 1e-300;
        let theta = s.theta.clone();
        assert!(potential(&theta, &s, &data).unwrap().abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = small_data(2, 50);
        for seed in 0..5 {
            let s = state_for(&data, seed);
            let Ok(g) = potential_gradient(&s.theta, &s, &data) else { continue };
            for j in 0..data.p() {
                let h = 1e-6;
                let mut tp = s.theta.clone();
                tp[j] += h;
                let mut tm = s.theta.clone();
                tm[j] -= h;
                let fd = (potential(&tp, &s, &data).unwrap() - potential(&tm, &s, &data).unwrap()) / (2.0 * h);
                assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1.0), "{j}: fd {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn quadratic_term_is_scale_invariant() {
        let data = small_data(3, 30);
        let s = state_for(&data, 7);
        let base = potential(&s.theta, &s, &data).unwrap();
        for c in [0.5, 2.0] {
            let mut t = s.clone();
            t.lambda2 *= c;
            t.sigma2 *= c;
            assert!((potential(&t.theta, &t, &data).unwrap() - base).abs() < 1e-12 * base.abs().max(1.0));
        }
    }

    #[test]
    fn zero_multiplier_leaves_only_the_prior_gradient() {
        let data = small_data(4, 30);
        let mut s = initial_state(&data).unwrap();
        s.lambda2 = 3.0;
        let g = potential_gradient(&s.theta, &s, &data).unwrap();
        let expect = s.prior_precision().component_mul(&s.theta);
        assert!((g - expect).amax() < 1e-12);
    }

    #[test]
    fn ridge_limit_of_prior_term() {
        let data = small_data(5, 30);
        let mut s = initial_state(&data).unwrap();
        s.tau_excess.fill(1e12);
        s.lambda2 = 2.0;
        s.sigma2 = 4.0;
        let u = potential(&s.theta, &s, &data).unwrap();
        assert!((u - 0.25 * s.theta.norm_squared()).abs() < 1e-9);
    }

    #[test]
    fn sigma2_scale_grows_with_theta_squared() {
        let hyper = Hyperparams::default();
        let s = ModelState::new(DVector::from_element(1, 0.0), &DVector::from_element(1, 2.0), 1.0, 1.0, 1.0).unwrap();
        assert_eq!(sigma2_conditional(&s, &hyper), (11.0, 10.25));
        let mut t = s.clone();
        t.theta[0] = 2.0;
        assert!(sigma2_conditional(&t, &hyper).1 > 10.25);
    }

    #[test]
    fn em_update_examples() {
        let e = EmExpectations { a: 4.0, b: 1.0 };
        let (l1, l2) = em_update(&e, 2).unwrap();
        assert!((l1 - 2.0).abs() < 1e-15 && (l2 - 2.0).abs() < 1e-15);
        let (g1, g2) = em_objective_gradient(l1, l2, &e, 2);
        assert!(g1.abs() < 1e-10 && g2.abs() < 1e-10);
        let (q1, q2) = em_update(&EmExpectations { a: 16.0, b: 1.0 }, 2).unwrap();
        assert!((q1 - 1.0).abs() < 1e-15 && (q2 - 2.0).abs() < 1e-15);
        assert!(matches!(
            em_update(&EmExpectations { a: 1.0, b: 0.0 }, 2),
            Err(BenelError::DegenerateExpectation(_))
        ));
    }

    #[test]
    fn fb_gamma_prior_with_zero_rate_equals_gig_prior_without_chi() {
        let s = ModelState::new(
            DVector::from_vec(vec![0.3, -1.0]),
            &DVector::from_vec(vec![1.5, 3.0]),
            2.0,
            1.3,
            0.7,
        )
        .unwrap();
        let gig = Hyperparams {
            nu2: 1.5,
            chi2: 0.0,
            ..Hyperparams::default()
        };
        let gamma = Hyperparams {
            lambda2_prior: Lambda2Prior::Gamma,
            r2: 1.5,
            delta2: 0.0,
            psi2: 0.0,
            ..Hyperparams::default()
        };
        let a = lambda2_conditional(&s, 1.3, &gig).unwrap();
        let b = lambda2_conditional(&s, 1.3, &Hyperparams { psi2: 1.0, ..gamma.clone() }).unwrap();
        assert_eq!(a.nu, b.nu);
        assert_eq!(a.chi, b.chi);
        assert!((a.psi - 1.0 - (b.psi - 0.0)).abs() < 1e-12);
        let mut r1 = RngStream::new(5, 0);
        let mut r2 = RngStream::new(5, 0);
        let gamma_rate_matched = Hyperparams {
            delta2: 0.5,
            ..gamma
        };
        assert_eq!(
            fb_lambda_updates(&s, &gig, &mut r1).unwrap(),
            fb_lambda_updates(&s, &gamma_rate_matched, &mut r2).unwrap()
        );
    }

    #[test]
    fn negative_nu2_with_zero_quadratic_still_validates() {
        let s = ModelState::new(DVector::zeros(3), &DVector::from_element(3, 2.0), 1.0, 1.0, 1.0).unwrap();
        let h = Hyperparams {
            nu2: -0.5,
            chi2: 0.0,
            ..Hyperparams::default()
        };
        let g = lambda2_conditional(&s, 1.0, &h).unwrap();
        assert_eq!(g.psi, h.psi2);
        let mut rng = RngStream::new(1, 0);
        assert!(fb_lambda_updates(&s, &h, &mut rng).unwrap().1 > 0.0);
    }

    #[test]
    fn state_validation() {
        let bad_tau = ModelState::new(DVector::zeros(2), &DVector::from_vec(vec![1.0, 2.0]), 1.0, 1.0, 1.0);
        assert!(bad_tau.is_err());
        let bad_sigma = ModelState::new(DVector::zeros(1), &DVector::from_element(1, 2.0), 0.0, 1.0, 1.0);
        assert!(bad_sigma.is_err());
    }

    #[test]
    fn initial_state_needs_more_rows_than_columns() {
        let raw = crate::data::RawData::new(
            DMatrix::from_fn(3, 3, |i, j| ((i + 1) * (j + 2)) as f64 + (i * j * i) as f64),
            DVector::from_vec(vec![1.0, 2.0, 4.0]),
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let d = standardize(&raw).unwrap();
        assert!(matches!(initial_state(&d), Err(BenelError::InsufficientSample { .. })));
    }

    #[test]
    fn short_eb_fit_is_reproducible() {
        let data = small_data(6, 30);
        let cfg = SamplerConfig {
            chains: 2,
            chain_length: 200,
            burnin: 100,
            step_size: Some(0.3),
            ..SamplerConfig::default()
        };
        let em = EmConfig {
            max_iters: 2,
            inner_length: 100,
            inner_burnin: 50,
            ..EmConfig::default()
        };
        let (a, ta) = fit_eb(&data, &Hyperparams::default(), &cfg, &em, 11).unwrap();
        let (b, tb) = fit_eb(&data, &Hyperparams::default(), &cfg, &em, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(ta.lambda1_path.len(), 3);
        assert!(ta.inner_chain_stats.iter().all(|s| s.r_improvement >= -1e-12));
        assert_eq!(a.theta_draws.n_draws(), 100);
        assert!(a.sigma2_draws.iter().flatten().all(|v| *v > 0.0));
    }

    #[test]
    fn short_fb_fit_samples_penalties() {
        let data = small_data(7, 30);
        let cfg = SamplerConfig {
            chains: 2,
            chain_length: 200,
            burnin: 100,
            step_size: Some(0.3),
            ..SamplerConfig::default()
        };
        let r = fit_fb(&data, &Hyperparams::default(), &cfg, 3).unwrap();
        let l1 = &r.lambda1_draws[0];
        assert!(l1.iter().all(|v| *v > 0.0));
        assert!(l1.windows(2).any(|w| w[0] != w[1]));
        assert!(r.lambda1 > 0.0 && r.lambda2 > 0.0);
    }
}
