//! Effective run configuration: defaults, overridden by a TOML file,
//! overridden by command-line flags.

use std::path::{Path, PathBuf};

use benel::data::{DesignKind, ErrorKind};
use benel::hmc::TunerConfig;
use benel::model::{EmConfig, FitMode, Hyperparams, Lambda2Prior, SamplerConfig};
use benel::selection::{SelectionConfig, SelectionCriterion};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Fit,
    Simulate,
    Tune,
    Diagnose,
    Benchmark,
    Sensitivity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Eb,
    Fb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Credible interval at level alpha.
    Ci,
    /// Scaled neighborhood with threshold eta.
    Sn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    Sim1,
    Sim2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ErrorDist {
    Normal,
    Mixture,
    Skewt,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The Bayesian elastic net on the empirical likelihood.
    Benel,
    /// Ordinary least squares, a fast reference predictor.
    Ols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Gig,
    Gamma,
}

/// Which penalty prior a sensitivity grid varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepPrior {
    /// `(r1, delta1)` of the gamma prior on `lambda1^2`.
    Lambda1,
    /// `(nu2, psi2)` of the GIG prior on `lambda2`, `chi2` held fixed.
    Lambda2,
}

/// Flags shared by every subcommand. Every field is optional so that unset
/// flags fall through to the config file and then to the defaults.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Overrides {
    /// Delimited text input (data for fit/tune, draws.csv for diagnose).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Name of the response column.
    #[arg(long)]
    pub response: Option<String>,
    /// Penalty estimation: empirical Bayes or full Bayes [default: eb].
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Production chains [default: 4].
    #[arg(long)]
    pub chains: Option<usize>,
    /// Iterations per chain, burn-in included [default: 2000].
    #[arg(long)]
    pub iters: Option<usize>,
    /// Burn-in iterations per chain [default: 1000].
    #[arg(long)]
    pub burnin: Option<usize>,
    /// Leapfrog steps per HMC proposal [default: 10].
    #[arg(long)]
    pub leapfrog: Option<usize>,
    /// Initial tuner step size [default: 0.5].
    #[arg(long)]
    pub omega0: Option<f64>,
    /// Fixed step size; skips tuning.
    #[arg(long)]
    pub omega: Option<f64>,
    /// Lower acceptance tolerance of the tuner [default: 0.05].
    #[arg(long)]
    pub tol_lower: Option<f64>,
    /// Upper acceptance tolerance of the tuner [default: 0.05].
    #[arg(long)]
    pub tol_upper: Option<f64>,
    /// Maximum tuner iterations [default: 50].
    #[arg(long)]
    pub itermax: Option<usize>,
    /// Tuning chain length, burn-in included [default: 2000].
    #[arg(long)]
    pub tune_iters: Option<usize>,
    /// Tuning chain burn-in [default: 1000].
    #[arg(long)]
    pub tune_burnin: Option<usize>,
    /// Shape of the inverse-gamma prior on sigma2 [default: 10].
    #[arg(long)]
    pub a: Option<f64>,
    /// Scale of the inverse-gamma prior on sigma2 [default: 10].
    #[arg(long)]
    pub b: Option<f64>,
    /// Gamma shape for lambda1^2 (full Bayes) [default: 1].
    #[arg(long)]
    pub r1: Option<f64>,
    /// Gamma rate for lambda1^2 (full Bayes) [default: 1].
    #[arg(long)]
    pub delta1: Option<f64>,
    /// Prior family for lambda2 (full Bayes) [default: gig].
    #[arg(long, value_enum)]
    pub lambda2_prior: Option<PriorKind>,
    /// GIG index for lambda2 [default: 1].
    #[arg(long)]
    pub nu2: Option<f64>,
    /// GIG psi for lambda2 [default: 1].
    #[arg(long)]
    pub psi2: Option<f64>,
    /// GIG chi for lambda2 [default: 1].
    #[arg(long)]
    pub chi2: Option<f64>,
    /// Gamma shape for lambda2 when --lambda2-prior gamma [default: 1].
    #[arg(long)]
    pub r2: Option<f64>,
    /// Gamma rate for lambda2 when --lambda2-prior gamma [default: 1].
    #[arg(long)]
    pub delta2: Option<f64>,
    /// EM iteration cap (empirical Bayes) [default: 20].
    #[arg(long)]
    pub em_iters: Option<usize>,
    /// Variable-selection rule [default: sn].
    #[arg(long, value_enum)]
    pub criterion: Option<Criterion>,
    /// alpha for ci, eta for sn [default: 0.5].
    #[arg(long)]
    pub level: Option<f64>,
    /// Level of the reported equal-tailed intervals [default: 0.95].
    #[arg(long)]
    pub interval_level: Option<f64>,
    /// Master seed [default: 1].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory [default: out].
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Write SVG trace plots and histograms.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub plots: Option<bool>,
    /// Fit on a random training subset of this size and score the rest.
    #[arg(long)]
    pub train: Option<usize>,
    /// Add the normal-approximation diagnostic to the fit report.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub normal_approx: Option<bool>,
    /// Simulation design [default: sim1].
    #[arg(long, value_enum)]
    pub design: Option<Design>,
    /// Simulation error law [default: normal].
    #[arg(long, value_enum)]
    pub error: Option<ErrorDist>,
    /// Training-set size for simulations [default: 50].
    #[arg(long)]
    pub n: Option<usize>,
    /// Simulation replications [default: 20; 100 for benchmark].
    #[arg(long)]
    pub reps: Option<usize>,
    /// Fitting method for simulations [default: benel].
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// Prior varied by the sensitivity grid [default: lambda1].
    #[arg(long, value_enum)]
    pub sweep: Option<SweepPrior>,
    /// Sensitivity grid values, comma separated [default: 0.25,0.5,...,10].
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// Second grid for the sensitivity sweep; defaults to --grid.
    #[arg(long, value_delimiter = ',')]
    pub grid2: Option<Vec<f64>>,
}

impl Overrides {
    /// `self` where set, `other` otherwise.
    fn or(self, other: Overrides) -> Overrides {
        macro_rules! pick {
            ($($f:ident),*) => { Overrides { $($f: self.$f.or(other.$f)),* } };
        }
        pick!(
            input, response, mode, chains, iters, burnin, leapfrog, omega0, omega, tol_lower, tol_upper, itermax,
            tune_iters, tune_burnin, a, b, r1, delta1, lambda2_prior, nu2, psi2, chi2, r2, delta2, em_iters,
            criterion, level, interval_level, seed, out_dir, plots, train, normal_approx, design, error, n, reps,
            method, sweep, grid, grid2
        )
    }
}

/// The fully resolved configuration, echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    pub input: Option<PathBuf>,
    pub response: Option<String>,
    pub mode: Mode,
    pub chains: usize,
    pub iters: usize,
    pub burnin: usize,
    pub leapfrog: usize,
    pub omega0: f64,
    pub omega: Option<f64>,
    pub tol_lower: f64,
    pub tol_upper: f64,
    pub itermax: usize,
    pub tune_iters: usize,
    pub tune_burnin: usize,
    pub hyper: Hyperparams,
    pub em_iters: usize,
    pub criterion: Criterion,
    pub level: f64,
    pub interval_level: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub plots: bool,
    pub train: Option<usize>,
    pub normal_approx: bool,
    pub design: Design,
    pub error: ErrorDist,
    pub n: usize,
    pub reps: usize,
    pub method: Method,
    pub sweep: SweepPrior,
    pub grid: Vec<f64>,
    pub grid2: Vec<f64>,
}

/// `0.25, 0.5, ..., 10`.
fn default_grid() -> Vec<f64> {
    (1..=40).map(|k| 0.25 * k as f64).collect()
}

impl RunConfig {
    /// Resolves flags over the optional config file over the defaults, then validates.
    pub fn resolve(command: Command, flags: Overrides, file: Option<&Path>) -> Result<Self, CliError> {
        let from_file = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
                toml::from_str::<Overrides>(&text)
                    .map_err(|e| CliError::Config(format!("config {}: {}", path.display(), e.message())))?
            }
            None => Overrides::default(),
        };
        let o = flags.or(from_file);
        let h = Hyperparams::default();
        let t = TunerConfig::default();
        let em = EmConfig::default();
        let s = SamplerConfig::default();
        let grid = o.grid.unwrap_or_else(default_grid);
        let cfg = RunConfig {
            command,
            input: o.input,
            response: o.response,
            mode: o.mode.unwrap_or(Mode::Eb),
            chains: o.chains.unwrap_or(s.chains),
            iters: o.iters.unwrap_or(s.chain_length),
            burnin: o.burnin.unwrap_or(s.burnin),
            leapfrog: o.leapfrog.unwrap_or(s.leapfrog_steps),
            omega0: o.omega0.unwrap_or(t.initial_step),
            omega: o.omega,
            tol_lower: o.tol_lower.unwrap_or(t.lower_tol),
            tol_upper: o.tol_upper.unwrap_or(t.upper_tol),
            itermax: o.itermax.unwrap_or(t.itermax),
            tune_iters: o.tune_iters.unwrap_or(t.tuning_chain_length),
            tune_burnin: o.tune_burnin.unwrap_or(t.tuning_burnin),
            hyper: Hyperparams {
                a: o.a.unwrap_or(h.a),
                b: o.b.unwrap_or(h.b),
                r1: o.r1.unwrap_or(h.r1),
                delta1: o.delta1.unwrap_or(h.delta1),
                nu2: o.nu2.unwrap_or(h.nu2),
                psi2: o.psi2.unwrap_or(h.psi2),
                chi2: o.chi2.unwrap_or(h.chi2),
                lambda2_prior: match o.lambda2_prior {
                    Some(PriorKind::Gamma) => Lambda2Prior::Gamma,
                    Some(PriorKind::Gig) => Lambda2Prior::Gig,
                    None => h.lambda2_prior,
                },
                r2: o.r2.unwrap_or(h.r2),
                delta2: o.delta2.unwrap_or(h.delta2),
            },
            em_iters: o.em_iters.unwrap_or(em.max_iters),
            criterion: o.criterion.unwrap_or(Criterion::Sn),
            level: o.level.unwrap_or(s.selection.level),
            interval_level: o.interval_level.unwrap_or(s.interval_level),
            seed: o.seed.unwrap_or(1),
            out_dir: o.out_dir.unwrap_or_else(|| PathBuf::from("out")),
            plots: o.plots.unwrap_or(false),
            train: o.train,
            normal_approx: o.normal_approx.unwrap_or(false),
            design: o.design.unwrap_or(Design::Sim1),
            error: o.error.unwrap_or(ErrorDist::Normal),
            n: o.n.unwrap_or(50),
            reps: o.reps.unwrap_or(if command == Command::Benchmark { 100 } else { 20 }),
            method: o.method.unwrap_or(Method::Benel),
            sweep: o.sweep.unwrap_or(SweepPrior::Lambda1),
            grid2: o.grid2.unwrap_or_else(|| grid.clone()),
            grid,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let needs_input = matches!(self.command, Command::Fit | Command::Diagnose);
        if needs_input && self.input.is_none() {
            return Err(CliError::Config("--input is required".into()));
        }
        if self.command == Command::Fit && self.response.is_none() {
            return Err(CliError::Config("--response is required".into()));
        }
        if self.command == Command::Tune && self.input.is_some() && self.response.is_none() {
            return Err(CliError::Config("--response is required with --input".into()));
        }
        if self.reps == 0 {
            return Err(CliError::Config("--reps must be at least 1".into()));
        }
        if self.train == Some(0) {
            return Err(CliError::Config("--train must be positive".into()));
        }
        if self.grid.is_empty() || self.grid2.is_empty() {
            return Err(CliError::Config("sensitivity grids must be non-empty".into()));
        }
        self.sampler().validate()?;
        self.em().validate()?;
        self.hyper.validate()?;
        Ok(())
    }

    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            criterion: match self.criterion {
                Criterion::Ci => SelectionCriterion::CredibleInterval,
                Criterion::Sn => SelectionCriterion::ScaledNeighborhood,
            },
            level: self.level,
        }
    }

    pub fn tuner(&self) -> TunerConfig {
        TunerConfig {
            itermax: self.itermax,
            initial_step: self.omega0,
            lower_tol: self.tol_lower,
            upper_tol: self.tol_upper,
            tuning_chain_length: self.tune_iters,
            tuning_burnin: self.tune_burnin,
            ..TunerConfig::default()
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            chains: self.chains,
            chain_length: self.iters,
            burnin: self.burnin,
            leapfrog_steps: self.leapfrog,
            tuner: self.tuner(),
            step_size: self.omega,
            interval_level: self.interval_level,
            selection: self.selection(),
            ..SamplerConfig::default()
        }
    }

    pub fn em(&self) -> EmConfig {
        EmConfig {
            max_iters: self.em_iters,
            ..EmConfig::default()
        }
    }

    pub fn fit_mode(&self) -> FitMode {
        match self.mode {
            Mode::Eb => FitMode::Eb,
            Mode::Fb => FitMode::Fb,
        }
    }

    pub fn design_kind(&self) -> DesignKind {
        match self.design {
            Design::Sim1 => DesignKind::Sim1,
            Design::Sim2 => DesignKind::Sim2,
        }
    }

    pub fn error_kind(&self) -> ErrorKind {
        match self.error {
            ErrorDist::Normal => ErrorKind::Normal,
            ErrorDist::Mixture => ErrorKind::Mixture,
            ErrorDist::Skewt => ErrorKind::SkewT,
            ErrorDist::Student => ErrorKind::StudentT,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_documented_values() {
        let c = RunConfig::resolve(Command::Simulate, Overrides::default(), None).unwrap();
        assert_eq!((c.leapfrog, c.chains, c.iters, c.burnin), (10, 4, 2000, 1000));
        assert_eq!((c.omega0, c.tol_lower, c.tol_upper), (0.5, 0.05, 0.05));
        assert_eq!((c.hyper.a, c.hyper.b, c.level), (10.0, 10.0, 0.5));
        assert_eq!(c.criterion, Criterion::Sn);
        assert_eq!(c.grid.len(), 40);
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "chains = 2\nseed = 9\nlevel = 0.7\n").unwrap();
        let flags = Overrides {
            chains: Some(3),
            ..Overrides::default()
        };
        let c = RunConfig::resolve(Command::Simulate, flags, Some(&path)).unwrap();
        assert_eq!(c.chains, 3);
        assert_eq!(c.seed, 9);
        assert_eq!(c.level, 0.7);
        assert_eq!(c.iters, 2000);
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "chians = 2\n").unwrap();
        let err = RunConfig::resolve(Command::Simulate, Overrides::default(), Some(&path)).unwrap_err();
        assert_eq!(err.category(), "config");
    }

    #[test]
    fn invalid_values_fail_before_any_compute() {
        let flags = Overrides {
            burnin: Some(3000),
            ..Overrides::default()
        };
        assert!(RunConfig::resolve(Command::Simulate, flags, None).is_err());
        assert!(RunConfig::resolve(Command::Fit, Overrides::default(), None).is_err());
    }
}
