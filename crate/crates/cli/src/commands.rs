use benel::data::{
    evaluate_replications, load_csv, split, standardize, Dataset, EvalReport, RawData, ReplicationFit, SimDesign,
};
use benel::dists::RngStream;
use benel::hmc::{split_rhat, TunerOutcome};
use benel::model::{
    fit_eb, fit_fb, initial_state, tune_gibbs, EmTrace, FitMode, FitReport, GibbsChain, Hyperparams, RHAT_THRESHOLD,
};
use benel::selection::{
    least_squares, normal_approx_diagnostic, select_credible, select_scaled_neighborhood, summarize,
    SelectionCriterion, SelectionResult,
};
use nalgebra::DVector;

use crate::config::{Method, Mode, RunConfig, SweepPrior};
use crate::error::CliError;
use crate::output::{draws_csv, parse_draws_csv, tuner_trace_csv, DrawTable, Outputs};
use crate::plot::{histogram_svg, slug, trace_svg};
use crate::report::*;

/// Stream id of the train/test split, apart from the sampler streams.
const SPLIT_STREAM: u64 = 0x5711;
const HISTOGRAM_BINS: usize = 40;
const SINGLE_CHAIN_WARNING: &str = "split-R-hat needs at least 2 chains; computed from the two halves of the single chain";

fn kind(s: &str) -> String {
    s.to_string()
}

fn one_line(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")
}

/// Posterior summary of a scalar parameter stored per chain.
fn scalar_summary(chains: &[Vec<f64>], level: f64) -> Result<ParamSummary, CliError> {
    let pooled: Vec<Vec<f64>> = chains.iter().flatten().map(|v| vec![*v]).collect();
    let s = summarize(&pooled, level)?.remove(0);
    let as_draws: Vec<Vec<Vec<f64>>> = chains.iter().map(|c| c.iter().map(|v| vec![*v]).collect()).collect();
    let rhat = split_rhat(&as_draws)?[0];
    Ok(ParamSummary {
        median: s.median,
        mean: s.mean,
        sd: s.sd,
        lower: s.lower,
        upper: s.upper,
        rhat: finite(rhat),
    })
}

fn run_fit(data: &Dataset, cfg: &RunConfig, seed: u64) -> Result<(FitReport, Option<EmTrace>), CliError> {
    let sampler = cfg.sampler();
    Ok(match cfg.fit_mode() {
        FitMode::Eb => {
            let (r, t) = fit_eb(data, &cfg.hyper, &sampler, &cfg.em(), seed)?;
            (r, Some(t))
        }
        FitMode::Fb => (fit_fb(data, &cfg.hyper, &sampler, seed)?, None),
    })
}

/// Standardized-scale coefficients with excluded entries set to zero.
fn selected_coefficients(fit: &FitReport) -> DVector<f64> {
    DVector::from_iterator(
        fit.medians().len(),
        fit.medians().iter().zip(&fit.selection.included).map(|(m, inc)| if *inc { *m } else { 0.0 }),
    )
}

fn mspe(data: &Dataset, test: &RawData, coef: &DVector<f64>) -> f64 {
    let pred = data.transform.predict(&test.x, coef);
    (&test.y - pred).norm_squared() / test.n() as f64
}

pub fn fit(cfg: &RunConfig) -> Result<Outputs, CliError> {
    let response = cfg.response.as_deref().expect("validated");
    let raw = load_csv(cfg.input.as_ref().expect("validated"), response)?;
    for reserved in ["chain", "iter", "sigma2", "lambda1", "lambda2"] {
        if raw.names.iter().any(|n| n == reserved) {
            return Err(CliError::Config(format!("covariate name {reserved:?} collides with a draws.csv column")));
        }
    }
    let (train, test) = match cfg.train {
        Some(n_train) => {
            let mut rng = RngStream::new(cfg.seed, SPLIT_STREAM);
            let (a, b) = split(&raw, n_train, &mut rng)?;
            (a, Some(b))
        }
        None => (raw.clone(), None),
    };
    let data = standardize(&train)?;
    let mut warnings = Vec::new();
    if cfg.chains == 1 {
        warnings.push(SINGLE_CHAIN_WARNING.to_string());
    }
    let (fit, em) = run_fit(&data, cfg, cfg.seed)?;
    if !fit.converged {
        warnings.push(format!("max split-R-hat {:.4} is not below {RHAT_THRESHOLD}", fit.max_rhat));
    }
    if let Some(t) = &em {
        if !t.converged {
            warnings.push("EM reached its iteration cap before meeting the tolerance".into());
        }
    }
    if fit.tuner.as_ref().is_some_and(|t| !t.in_band) {
        warnings.push("step-size tuner exhausted itermax without entering the acceptance band".into());
    }
    let pooled = fit.theta_draws.pooled();
    let normal_approx = if cfg.normal_approx {
        Some(normal_approx_diagnostic(&data.x, &data.y, &pooled, &fit.prior_precision_mean)?)
    } else {
        None
    };
    let prediction = test.as_ref().map(|t| Prediction {
        n_test: t.n(),
        mspe: mspe(&data, t, &selected_coefficients(&fit)),
    });

    let raw_medians = data.transform.raw_coefficients(&DVector::from_vec(fit.medians()));
    let coefficients = fit
        .summary
        .coefficients
        .iter()
        .enumerate()
        .map(|(j, c)| CoefficientEntry {
            name: fit.names[j].clone(),
            median: c.median,
            mean: c.mean,
            sd: c.sd,
            lower: c.lower,
            upper: c.upper,
            sn_probability: c.sn_probability,
            rhat: finite(fit.summary.rhat[j]),
            selected: fit.selection.included[j],
            raw_median: raw_medians[j],
        })
        .collect();
    let fb = cfg.mode == Mode::Fb;
    let report = FitReportJson {
        schema_version: SCHEMA_VERSION,
        kind: kind("fit"),
        config: cfg.clone(),
        mode: cfg.mode,
        data: DataInfo {
            response: response.to_string(),
            names: fit.names.clone(),
            n_rows: raw.n(),
            n_train: data.n(),
            p: data.p(),
        },
        sampler: SamplerInfo {
            step_size: fit.step_size,
            tuner: fit.tuner.as_ref().map(TunerSummary::from),
            retuned: fit.retuned,
            acceptance_rates: fit.summary.acceptance_rates.clone(),
            chains: fit.theta_draws.n_chains(),
            draws_per_chain: fit.theta_draws.n_draws(),
            tau_clamped: fit.tau_clamped,
        },
        penalties: Penalties {
            lambda1: fit.lambda1,
            lambda2: fit.lambda2,
            em,
            lambda1_posterior: if fb { Some(scalar_summary(&fit.lambda1_draws, cfg.interval_level)?) } else { None },
            lambda2_posterior: if fb { Some(scalar_summary(&fit.lambda2_draws, cfg.interval_level)?) } else { None },
        },
        coefficients,
        sigma2: scalar_summary(&fit.sigma2_draws, cfg.interval_level)?,
        selection: SelectionInfo {
            criterion: fit.selection.criterion,
            level: fit.selection.level,
        },
        diagnostics: Diagnostics {
            max_rhat: finite(fit.max_rhat),
            converged: fit.converged,
            rhat_threshold: RHAT_THRESHOLD,
            warnings,
        },
        normal_approx,
        prediction,
    };

    println!(
        "fit: {} mode, {} chains x {} draws, omega {:.4}, lambda1 {:.4}, lambda2 {:.4}, max R-hat {:.4}",
        if fb { "fb" } else { "eb" },
        report.sampler.chains,
        report.sampler.draws_per_chain,
        fit.step_size,
        fit.lambda1,
        fit.lambda2,
        fit.max_rhat
    );
    for c in &report.coefficients {
        println!(
            "  {:<12} median {:>9.4}  [{:>9.4}, {:>9.4}]  R-hat {:>7}  {}",
            c.name,
            c.median,
            c.lower,
            c.upper,
            c.rhat.map_or("inf".into(), |r| format!("{r:.4}")),
            if c.selected { "selected" } else { "excluded" }
        );
    }
    if let Some(p) = &report.prediction {
        println!("  test MSPE {:.4} on {} held-out rows", p.mspe, p.n_test);
    }

    let mut out = Outputs::default();
    out.add("report.json", to_json(&report));
    out.add(
        "draws.csv",
        draws_csv(&DrawTable {
            names: &fit.names,
            burnin: cfg.burnin,
            theta: &fit.theta_draws.draws,
            sigma2: &fit.sigma2_draws,
            lambda1: &fit.lambda1_draws,
            lambda2: &fit.lambda2_draws,
        }),
    );
    out.add("tuner_trace.csv", tuner_trace_csv(fit.tuner.as_ref()));
    if cfg.plots {
        for (j, name) in fit.names.iter().enumerate() {
            let chains: Vec<Vec<f64>> = fit.theta_draws.draws.iter().map(|c| c.iter().map(|d| d[j]).collect()).collect();
            out.add(format!("trace_{}.svg", slug(name)), trace_svg(&format!("trace of {name}"), &chains));
            let pooled_j: Vec<f64> = pooled.iter().map(|d| d[j]).collect();
            out.add(
                format!("hist_{}.svg", slug(name)),
                histogram_svg(&format!("posterior of {name}"), &pooled_j, HISTOGRAM_BINS),
            );
        }
    }
    Ok(out)
}

fn replication_fit(data: &Dataset, cfg: &RunConfig, seed: u64) -> benel::Result<ReplicationFit> {
    match cfg.method {
        Method::Ols => Ok(ReplicationFit {
            coefficients: least_squares(&data.x, &data.y)?.iter().copied().collect(),
            draws: Vec::new(),
            max_rhat: None,
        }),
        Method::Benel => {
            let (fit, _) = run_fit(data, cfg, seed).map_err(|e| match e {
                CliError::Core(e) => e,
                other => benel::BenelError::InvalidInput(other.to_string()),
            })?;
            Ok(ReplicationFit {
                coefficients: fit.medians(),
                draws: fit.theta_draws.pooled(),
                max_rhat: Some(fit.max_rhat),
            })
        }
    }
}

fn evaluate(design: &SimDesign, cfg: &RunConfig) -> Result<EvalReport, CliError> {
    let selection = cfg.selection();
    Ok(evaluate_replications(design, |d, s| replication_fit(d, cfg, s), cfg.reps, &selection)?)
}

fn print_eval(label: &str, e: &EvalReport) {
    println!(
        "{label}: MMSPE {:.3} (SE {:.3}{}) over {} replications",
        e.mmspe,
        e.se_bootstrap,
        if e.degenerate_se { ", degenerate" } else { "" },
        e.mspe_per_replication.len()
    );
    let header: Vec<String> = (1..=e.exclusion_frequency.len()).map(|j| format!("{:>6}", format!("t{j}"))).collect();
    println!("  exclusion %  {}", header.join(""));
    let row: Vec<String> = e.exclusion_frequency.iter().map(|v| format!("{v:>6.0}")).collect();
    println!("               {}", row.join(""));
}

pub fn simulate(cfg: &RunConfig) -> Result<Outputs, CliError> {
    let design = SimDesign::new(cfg.design_kind(), cfg.n, cfg.error_kind(), cfg.seed);
    let eval = evaluate(&design, cfg)?;
    print_eval(&format!("{:?}/{:?}/n={}", cfg.design, cfg.error, cfg.n).to_lowercase(), &eval);
    println!("  MSPE per replication: {}", one_line(&eval.mspe_per_replication));
    let report = SimulateReportJson {
        schema_version: SCHEMA_VERSION,
        kind: kind("simulate"),
        config: cfg.clone(),
        method: cfg.method,
        design,
        replications: cfg.reps,
        eval,
    };
    let mut out = Outputs::default();
    out.add("report.json", to_json(&report));
    Ok(out)
}

/// All sample-size and error cells of the first design. Long running at the
/// default 100 replications.
pub fn benchmark(cfg: &RunConfig) -> Result<Outputs, CliError> {
    use crate::config::ErrorDist;
    let mut cells = Vec::new();
    for error in [ErrorDist::Normal, ErrorDist::Mixture, ErrorDist::Skewt] {
        for n in [50, 100, 200] {
            let cell_cfg = RunConfig { n, error, ..cfg.clone() };
            let design = SimDesign::new(cfg.design_kind(), n, cell_cfg.error_kind(), cfg.seed);
            let eval = evaluate(&design, &cell_cfg)?;
            let label = format!("{error:?}/n={n}").to_lowercase();
            print_eval(&label, &eval);
            cells.push(BenchmarkCell {
                n,
                error: format!("{error:?}").to_lowercase(),
                eval,
            });
        }
    }
    let report = BenchmarkReportJson {
        schema_version: SCHEMA_VERSION,
        kind: kind("benchmark"),
        config: cfg.clone(),
        cells,
    };
    let mut out = Outputs::default();
    out.add("report.json", to_json(&report));
    Ok(out)
}

/// Training data for tune and sensitivity: the input file, or replication 0
/// of the configured design.
fn working_data(cfg: &RunConfig) -> Result<(Dataset, String), CliError> {
    match (&cfg.input, &cfg.response) {
        (Some(path), Some(response)) => Ok((standardize(&load_csv(path, response)?)?, "data".into())),
        _ => {
            let design = SimDesign::new(cfg.design_kind(), cfg.n, cfg.error_kind(), cfg.seed);
            let (train, _) = design.generate(0)?;
            Ok((standardize(&train)?, format!("{:?}", cfg.design).to_lowercase()))
        }
    }
}

pub fn tune(cfg: &RunConfig) -> Result<Outputs, CliError> {
    let (data, target) = working_data(cfg)?;
    let sampler = cfg.sampler();
    let mut chain = GibbsChain::new(initial_state(&data)?);
    let mut rng = RngStream::new(cfg.seed, 1);
    let outcome: TunerOutcome = tune_gibbs(&mut chain, &data, &cfg.hyper, cfg.fit_mode(), &sampler, cfg.omega0, &mut rng)?;
    println!("{:>9} {:>12} {:>12} {:>10}  branch", "iteration", "omega", "epsilon", "rate");
    for r in &outcome.trace {
        println!(
            "{:>9} {:>12.6} {:>12.6} {:>10.4}  {}",
            r.iteration,
            r.step_size,
            r.increment,
            r.acceptance_rate,
            serde_json::to_value(r.branch).expect("enum serializes").as_str().unwrap_or_default()
        );
    }
    println!(
        "omega = {:.6}, acceptance rate = {:.4}, {}",
        outcome.step_size,
        outcome.acceptance_rate,
        if outcome.in_band { "in band" } else { "itermax exhausted" }
    );
    let report = TuneReportJson {
        schema_version: SCHEMA_VERSION,
        kind: kind("tune"),
        config: cfg.clone(),
        target,
        outcome,
    };
    let mut out = Outputs::default();
    out.add("tuner_trace.csv", tuner_trace_csv(Some(&report.outcome)));
    out.add("report.json", to_json(&report));
    Ok(out)
}

const NON_COEFFICIENT_COLUMNS: [&str; 3] = ["sigma2", "lambda1", "lambda2"];

pub fn diagnose(cfg: &RunConfig) -> Result<Outputs, CliError> {
    let parsed = parse_draws_csv(cfg.input.as_ref().expect("validated"))?;
    let mut warnings = Vec::new();
    if parsed.draws.len() == 1 {
        log::warn!("{SINGLE_CHAIN_WARNING}");
        warnings.push(SINGLE_CHAIN_WARNING.to_string());
    }
    let n = parsed.draws.iter().map(Vec::len).min().unwrap_or(0);
    if parsed.draws.iter().any(|c| c.len() != n) {
        warnings.push(format!("chains have unequal lengths; R-hat uses the first {n} draws of each"));
    }
    let trimmed: Vec<Vec<Vec<f64>>> = parsed.draws.iter().map(|c| c[..n].to_vec()).collect();
    let rhat = split_rhat(&trimmed)?;
    let pooled: Vec<Vec<f64>> = parsed.draws.iter().flatten().cloned().collect();
    let summaries = summarize(&pooled, cfg.interval_level)?;
    let coef_idx: Vec<usize> =
        (0..parsed.columns.len()).filter(|&j| !NON_COEFFICIENT_COLUMNS.contains(&parsed.columns[j].as_str())).collect();
    let coef_draws: Vec<Vec<f64>> = pooled.iter().map(|d| coef_idx.iter().map(|&j| d[j]).collect()).collect();
    let selection: Option<SelectionResult> = if coef_idx.is_empty() {
        None
    } else {
        let sel = cfg.selection();
        Some(match sel.criterion {
            SelectionCriterion::CredibleInterval => select_credible(&coef_draws, sel.level)?,
            SelectionCriterion::ScaledNeighborhood => select_scaled_neighborhood(&coef_draws, sel.level)?,
        })
    };
    let parameters: Vec<DiagnosedParam> = parsed
        .columns
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let s = &summaries[j];
            DiagnosedParam {
                name: name.clone(),
                summary: ParamSummary {
                    median: s.median,
                    mean: s.mean,
                    sd: s.sd,
                    lower: s.lower,
                    upper: s.upper,
                    rhat: finite(rhat[j]),
                },
                sn_probability: s.sn_probability,
                selected: coef_idx
                    .iter()
                    .position(|&k| k == j)
                    .and_then(|k| selection.as_ref().map(|sel| sel.included[k])),
            }
        })
        .collect();
    let coef_rhat: Vec<f64> = coef_idx.iter().map(|&j| rhat[j]).collect();
    let max_rhat = coef_rhat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let converged = coef_rhat.iter().all(|r| *r < RHAT_THRESHOLD);
    println!("{} chains x {} draws", parsed.draws.len(), n);
    for p in &parameters {
        println!(
            "  {:<12} median {:>10.4}  sd {:>9.4}  R-hat {:>7}{}",
            p.name,
            p.summary.median,
            p.summary.sd,
            p.summary.rhat.map_or("inf".into(), |r| format!("{r:.4}")),
            match p.selected {
                Some(true) => "  selected",
                Some(false) => "  excluded",
                None => "",
            }
        );
    }
    let sel = cfg.selection();
    let report = DiagnoseReportJson {
        schema_version: SCHEMA_VERSION,
        kind: kind("diagnose"),
        config: cfg.clone(),
        chains: parsed.draws.len(),
        draws_per_chain: n,
        parameters,
        selection: SelectionInfo {
            criterion: sel.criterion,
            level: sel.level,
        },
        diagnostics: Diagnostics {
            max_rhat: finite(max_rhat),
            converged,
            rhat_threshold: RHAT_THRESHOLD,
            warnings,
        },
    };
    let mut out = Outputs::default();
    out.add("diagnostics.json", to_json(&report));
    Ok(out)
}

/// Full-Bayes fits of one dataset over a two-dimensional hyperparameter grid.
pub fn sensitivity(cfg: &RunConfig) -> Result<Outputs, CliError> {
    let (data, _) = working_data(cfg)?;
    let axes = match cfg.sweep {
        SweepPrior::Lambda1 => ["r1".to_string(), "delta1".to_string()],
        SweepPrior::Lambda2 => ["nu2".to_string(), "psi2".to_string()],
    };
    let fb = RunConfig {
        mode: Mode::Fb,
        ..cfg.clone()
    };
    let mut rows = Vec::new();
    for &u in &cfg.grid {
        for &v in &cfg.grid2 {
            let hyper = match cfg.sweep {
                SweepPrior::Lambda1 => Hyperparams {
                    r1: u,
                    delta1: v,
                    ..cfg.hyper.clone()
                },
                SweepPrior::Lambda2 => Hyperparams {
                    nu2: u,
                    psi2: v,
                    lambda2_prior: benel::model::Lambda2Prior::Gig,
                    ..cfg.hyper.clone()
                },
            };
            hyper.validate()?;
            let cell = RunConfig { hyper, ..fb.clone() };
            let (fit, _) = run_fit(&data, &cell, cfg.seed)?;
            println!("{} = {u}, {} = {v}: medians {}", axes[0], axes[1], one_line(&fit.medians()));
            rows.push(SensitivityRow {
                first: u,
                second: v,
                medians: fit.medians(),
                max_rhat: finite(fit.max_rhat),
            });
        }
    }
    let mut csv = format!("{},{},{},max_rhat\n", axes[0], axes[1], data.names.join(","));
    for r in &rows {
        let cells: Vec<String> = r.medians.iter().map(|m| crate::output::full(*m)).collect();
        csv.push_str(&format!(
            "{},{},{},{}\n",
            crate::output::full(r.first),
            crate::output::full(r.second),
            cells.join(","),
            r.max_rhat.map_or("inf".into(), crate::output::full)
        ));
    }
    let report = SensitivityReportJson {
        schema_version: SCHEMA_VERSION,
        kind: kind("sensitivity"),
        config: cfg.clone(),
        sweep: cfg.sweep,
        axes,
        names: data.names.clone(),
        rows,
    };
    let mut out = Outputs::default();
    out.add("sensitivity.csv", csv);
    out.add("report.json", to_json(&report));
    Ok(out)
}
