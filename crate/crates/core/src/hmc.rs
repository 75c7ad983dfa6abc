//! Hamiltonian Monte Carlo over a user-supplied potential, the bisection
//! step-size tuner, multi-chain orchestration and split-R-hat.

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dists::RngStream;
use crate::{BenelError, Result};

/// Potential energy `U(theta) = -log pi(theta)` and its gradient.
///
/// Methods take `&mut self` so implementations can carry warm-start state
/// between nearby evaluations; chains each work on their own clone.
pub trait Potential {
    fn dim(&self) -> usize;

    /// `U` and `dU/dtheta`, or `None` where the density is zero.
    fn value_and_gradient(&mut self, theta: &DVector<f64>) -> Option<(f64, DVector<f64>)>;

    /// `U`, with `+inf` where the density is zero.
    fn value(&mut self, theta: &DVector<f64>) -> f64 {
        self.value_and_gradient(theta).map_or(f64::INFINITY, |(u, _)| u)
    }
}

/// Adapts a pair of closures into a [`Potential`].
#[derive(Clone)]
pub struct FnPotential<F> {
    dim: usize,
    f: F,
}

impl<F> FnPotential<F>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Potential for FnPotential<F>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_and_gradient(&mut self, theta: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        (self.f)(theta)
    }
}

/// `U(theta) = theta' theta / 2`: the standard normal target.
pub fn standard_normal_potential(dim: usize) -> FnPotential<impl FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)> + Clone + Send> {
    FnPotential::new(dim, |t: &DVector<f64>| Some((0.5 * t.norm_squared(), t.clone())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    /// Diagonal of the mass matrix.
    pub mass_diagonal: Vec<f64>,
}

impl HmcConfig {
    pub fn identity(dim: usize, step_size: f64, leapfrog_steps: usize) -> Self {
        Self {
            step_size,
            leapfrog_steps,
            mass_diagonal: vec![1.0; dim],
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(BenelError::InvalidInput(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.leapfrog_steps == 0 {
            return Err(BenelError::InvalidInput("leapfrog steps must be at least 1".into()));
        }
        if self.mass_diagonal.len() != dim || self.mass_diagonal.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
            return Err(BenelError::InvalidInput(format!(
                "mass diagonal must have {dim} positive entries"
            )));
        }
        Ok(())
    }
}

/// Phase-space point at the end of a leapfrog trajectory.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub position: DVector<f64>,
    pub momentum: DVector<f64>,
    pub potential: f64,
    pub gradient: DVector<f64>,
}

/// Runs `steps` leapfrog updates. Returns `None` as soon as a position with
/// zero density (or a non-finite potential) is reached.
pub fn leapfrog<P: Potential + ?Sized>(
    potential: &mut P,
    position: &DVector<f64>,
    momentum: &DVector<f64>,
    gradient: &DVector<f64>,
    step_size: f64,
    steps: usize,
    inv_mass: &DVector<f64>,
) -> Option<Trajectory> {
    let mut pos = position.clone();
    let mut mom = momentum.clone();
    let mut grad = gradient.clone();
    let mut u = f64::NAN;
    for _ in 0..steps {
        mom.axpy(-0.5 * step_size, &grad, 1.0);
        pos += mom.component_mul(inv_mass) * step_size;
        let (u_new, g_new) = potential.value_and_gradient(&pos)?;
        if !u_new.is_finite() || g_new.iter().any(|v| !v.is_finite()) {
            return None;
        }
        u = u_new;
        grad = g_new;
        mom.axpy(-0.5 * step_size, &grad, 1.0);
    }
    Some(Trajectory {
        position: pos,
        momentum: mom,
        potential: u,
        gradient: grad,
    })
}

#[derive(Debug, Clone)]
pub struct HmcTransition {
    pub position: DVector<f64>,
    pub accepted: bool,
    /// `H(proposal) - H(current)`; `+inf` when the trajectory left the support.
    pub energy_change: f64,
    /// The trajectory hit a zero-density point and was rejected outright.
    pub left_support: bool,
}

fn kinetic(momentum: &DVector<f64>, inv_mass: &DVector<f64>) -> f64 {
    0.5 * momentum.iter().zip(inv_mass.iter()).map(|(m, w)| m * m * w).sum::<f64>()
}

/// One HMC transition: fresh momentum from `N(0, M)`, a leapfrog trajectory,
/// and a Metropolis correction on the total energy.
pub fn hmc_step<P: Potential + ?Sized>(
    state: &DVector<f64>,
    potential: &mut P,
    cfg: &HmcConfig,
    rng: &mut RngStream,
) -> Result<HmcTransition> {
    let dim = potential.dim();
    if state.len() != dim {
        return Err(BenelError::InvalidInput(format!("state has length {}, potential has dim {dim}", state.len())));
    }
    cfg.validate(dim)?;
    let (u0, g0) = potential
        .value_and_gradient(state)
        .filter(|(u, _)| u.is_finite())
        .ok_or_else(|| BenelError::InvalidState("potential is not finite at the current state".into()))?;

    let mass = DVector::from_column_slice(&cfg.mass_diagonal);
    let inv_mass = mass.map(|m| 1.0 / m);
    let momentum = DVector::from_fn(dim, |j, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * mass[j].sqrt()
    });
    let h0 = u0 + kinetic(&momentum, &inv_mass);

    let Some(end) = leapfrog(potential, state, &momentum, &g0, cfg.step_size, cfg.leapfrog_steps, &inv_mass) else {
        return Ok(HmcTransition {
            position: state.clone(),
            accepted: false,
            energy_change: f64::INFINITY,
            left_support: true,
        });
    };
    let h1 = end.potential + kinetic(&end.momentum, &inv_mass);
    let delta = h1 - h0;
    let accept = if delta <= 0.0 { true } else { rng.open_unit().ln() < -delta };
    Ok(HmcTransition {
        position: if accept { end.position } else { state.clone() },
        accepted: accept,
        energy_change: delta,
        left_support: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerConfig {
    pub itermax: usize,
    pub initial_step: f64,
    pub lower_tol: f64,
    pub upper_tol: f64,
    /// Total length of each tuning chain, burn-in included.
    pub tuning_chain_length: usize,
    pub tuning_burnin: usize,
    pub target_rate: f64,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            itermax: 50,
            initial_step: 0.5,
            lower_tol: 0.05,
            upper_tol: 0.05,
            tuning_chain_length: 2000,
            tuning_burnin: 1000,
            target_rate: 0.651,
        }
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.itermax >= 1
            && self.initial_step.is_finite()
            && self.initial_step > 0.0
            && self.lower_tol > 0.0
            && self.upper_tol > 0.0
            && self.lower_tol < self.target_rate
            && self.upper_tol < self.target_rate
            && self.target_rate < 1.0
            && self.tuning_chain_length > self.tuning_burnin;
        if ok {
            Ok(())
        } else {
            Err(BenelError::InvalidInput(format!("invalid tuner configuration {self:?}")))
        }
    }

    fn band(&self) -> (f64, f64) {
        (self.target_rate - self.lower_tol, self.target_rate + self.upper_tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TunerBranch {
    InBand,
    Increase,
    Decrease,
}

/// One tuner iteration: the step size that was tried, the increment in
/// force when it was tried, the measured rate and the branch taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerRecord {
    pub iteration: usize,
    pub step_size: f64,
    pub increment: f64,
    pub acceptance_rate: f64,
    pub branch: TunerBranch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerOutcome {
    pub step_size: f64,
    pub acceptance_rate: f64,
    pub iterations: usize,
    pub in_band: bool,
    /// Times the decrease branch would have made the step size nonpositive.
    pub clamped: usize,
    pub trace: Vec<TunerRecord>,
}

/// Bisection search for a step size whose acceptance rate falls in
/// `[target - lower_tol, target + upper_tol]`.
///
/// `rate_at(omega)` simulates a tuning chain and returns its acceptance
/// rate. The step grows by the current increment while the rate is too high;
/// each time the rate is too low the increment is halved and subtracted.
/// Once any decrease has happened, increases also halve the increment.
/// On exhaustion the last tried step size and its rate are returned.
pub fn bisection_tune(cfg: &TunerConfig, mut rate_at: impl FnMut(f64) -> Result<f64>) -> Result<TunerOutcome> {
    cfg.validate()?;
    let (lo, hi) = cfg.band();
    let mut omega = cfg.initial_step;
    let mut eps = omega;
    let mut decreases = 0usize;
    let mut clamped = 0usize;
    let mut trace = Vec::new();
    let mut last = (omega, f64::NAN);
    for iteration in 1..=cfg.itermax {
        let rate = rate_at(omega)?;
        last = (omega, rate);
        let branch = if (lo..=hi).contains(&rate) {
            TunerBranch::InBand
        } else if rate > hi {
            TunerBranch::Increase
        } else {
            TunerBranch::Decrease
        };
        trace.push(TunerRecord {
            iteration,
            step_size: omega,
            increment: eps,
            acceptance_rate: rate,
            branch,
        });
        match branch {
            TunerBranch::InBand => {
                return Ok(TunerOutcome {
                    step_size: omega,
                    acceptance_rate: rate,
                    iterations: iteration,
                    in_band: true,
                    clamped,
                    trace,
                })
            }
            TunerBranch::Increase => {
                if decreases > 0 {
                    eps /= 2.0;
                }
                omega += eps;
            }
            TunerBranch::Decrease => {
                decreases += 1;
                eps /= 2.0;
                omega -= eps;
                if omega <= 0.0 {
                    log::warn!("tuner step size reached {omega}; clamped to {}", eps / 2.0);
                    omega = eps / 2.0;
                    clamped += 1;
                }
            }
        }
    }
    log::warn!("step-size tuner exhausted {} iterations without entering the band", cfg.itermax);
    Ok(TunerOutcome {
        step_size: last.0,
        acceptance_rate: last.1,
        iterations: cfg.itermax,
        in_band: false,
        clamped,
        trace,
    })
}

/// Tunes the step size of plain HMC on a fixed potential. Each tuning chain
/// continues from where the previous one stopped.
pub fn tune_step_size<P: Potential + ?Sized>(
    potential: &mut P,
    cfg: &TunerConfig,
    leapfrog_steps: usize,
    init_state: &DVector<f64>,
    rng: &mut RngStream,
) -> Result<TunerOutcome> {
    if !potential.value(init_state).is_finite() {
        return Err(BenelError::InvalidState("potential is not finite at the tuner's initial state".into()));
    }
    let dim = potential.dim();
    let mut state = init_state.clone();
    bisection_tune(cfg, |omega| {
        let hmc = HmcConfig::identity(dim, omega, leapfrog_steps);
        let mut accepted = 0usize;
        for it in 0..cfg.tuning_chain_length {
            let tr = hmc_step(&state, potential, &hmc, rng)?;
            state = tr.position;
            if it >= cfg.tuning_burnin && tr.accepted {
                accepted += 1;
            }
        }
        Ok(accepted as f64 / (cfg.tuning_chain_length - cfg.tuning_burnin) as f64)
    })
}

/// Post-burn-in draws of several chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSet {
    /// `draws[chain][iteration][coordinate]`.
    pub draws: Vec<Vec<Vec<f64>>>,
    pub acceptance_rates: Vec<f64>,
    pub seed: u64,
    pub stream_ids: Vec<u64>,
    pub burnin: usize,
}

impl ChainSet {
    pub fn n_chains(&self) -> usize {
        self.draws.len()
    }

    pub fn n_draws(&self) -> usize {
        self.draws.first().map_or(0, Vec::len)
    }

    pub fn dim(&self) -> usize {
        self.draws.first().and_then(|c| c.first()).map_or(0, Vec::len)
    }

    /// All draws of all chains, chain by chain.
    pub fn pooled(&self) -> Vec<Vec<f64>> {
        self.draws.iter().flatten().cloned().collect()
    }

    pub fn pooled_coordinate(&self, j: usize) -> Vec<f64> {
        self.draws.iter().flatten().map(|d| d[j]).collect()
    }

    pub fn mean_acceptance(&self) -> f64 {
        self.acceptance_rates.iter().sum::<f64>() / self.acceptance_rates.len().max(1) as f64
    }
}

/// Stream ids for chain `c` are `CHAIN_STREAM_BASE + c`.
pub const CHAIN_STREAM_BASE: u64 = 100;

/// Runs independent HMC chains in parallel, each on its own stream of `seed`.
/// `chain_length` counts burn-in iterations.
pub fn run_chains<P>(
    potential: &P,
    cfg: &HmcConfig,
    chain_length: usize,
    burnin: usize,
    init_states: &[DVector<f64>],
    seed: u64,
) -> Result<ChainSet>
where
    P: Potential + Clone + Send + Sync,
{
    if init_states.is_empty() {
        return Err(BenelError::InvalidInput("need at least one chain".into()));
    }
    if burnin >= chain_length {
        return Err(BenelError::InvalidInput(format!(
            "burn-in ({burnin}) must be shorter than the chain ({chain_length})"
        )));
    }
    cfg.validate(potential.dim())?;
    for (c, s) in init_states.iter().enumerate() {
        let mut p = potential.clone();
        if s.len() != p.dim() || !p.value(s).is_finite() {
            return Err(BenelError::InvalidState(format!("chain {c} starts at an infeasible state")));
        }
    }
    let stream_ids: Vec<u64> = (0..init_states.len() as u64).map(|c| CHAIN_STREAM_BASE + c).collect();
    let results: Vec<Result<(Vec<Vec<f64>>, f64)>> = init_states
        .par_iter()
        .zip(stream_ids.par_iter())
        .map(|(init, &sid)| {
            let mut pot = potential.clone();
            let mut rng = RngStream::new(seed, sid);
            let mut state = init.clone();
            let mut kept = Vec::with_capacity(chain_length - burnin);
            let mut accepted = 0usize;
            for it in 0..chain_length {
                let tr = hmc_step(&state, &mut pot, cfg, &mut rng)?;
                state = tr.position;
                if it >= burnin {
                    accepted += tr.accepted as usize;
                    kept.push(state.iter().copied().collect());
                }
            }
            Ok((kept, accepted as f64 / (chain_length - burnin) as f64))
        })
        .collect();
    let mut draws = Vec::with_capacity(results.len());
    let mut acceptance_rates = Vec::with_capacity(results.len());
    for r in results {
        let (d, a) = r?;
        draws.push(d);
        acceptance_rates.push(a);
    }
    Ok(ChainSet {
        draws,
        acceptance_rates,
        seed,
        stream_ids,
        burnin,
    })
}

fn mean_and_var(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let m = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var)
}

/// Split-R-hat for every coordinate.
///
/// Each chain is cut into two halves (a middle draw is dropped when the
/// length is odd). With `W` the mean half-chain variance, `B` the half-chain
/// length times the variance of half-chain means and `N` the half-chain
/// length, returns `sqrt(((N - 1)/N W + B/N) / W)`. A coordinate with zero
/// within-chain variance yields `+inf`.
pub fn split_rhat(draws: &[Vec<Vec<f64>>]) -> Result<Vec<f64>> {
    if draws.is_empty() {
        return Err(BenelError::InvalidInput("split-R-hat needs at least one chain".into()));
    }
    let n = draws.iter().map(Vec::len).min().unwrap_or(0);
    if n < 4 {
        return Err(BenelError::InsufficientSample { needed: 4, got: n });
    }
    let dim = draws[0][0].len();
    if draws.iter().flatten().any(|d| d.len() != dim) {
        return Err(BenelError::InvalidInput("draws have inconsistent dimension".into()));
    }
    let half = n / 2;
    let mut out = Vec::with_capacity(dim);
    for j in 0..dim {
        let mut means = Vec::with_capacity(2 * draws.len());
        let mut vars = Vec::with_capacity(2 * draws.len());
        for chain in draws {
            for part in [&chain[..half], &chain[n - half..n]] {
                let (m, v) = mean_and_var(part.iter().map(|d| d[j]));
                means.push(m);
                vars.push(v);
            }
        }
        let w = vars.iter().sum::<f64>() / vars.len() as f64;
        let (_, var_means) = mean_and_var(means.iter().copied());
        let b = half as f64 * var_means;
        let nh = half as f64;
        let rhat = if w > 0.0 {
            (((nh - 1.0) / nh * w + b / nh) / w).sqrt()
        } else {
            log::warn!("coordinate {j} has zero within-chain variance; split-R-hat is infinite");
            f64::INFINITY
        };
        out.push(rhat);
    }
    Ok(out)
}
