//! Versioned JSON report shapes. Each report carries `schema_version` and a
//! `kind` tag; [`validate_report`] re-reads a report against these types.

use benel::data::{EvalReport, SimDesign};
use benel::hmc::TunerOutcome;
use benel::model::EmTrace;
use benel::selection::{NormalApprox, SelectionCriterion};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{Method, Mode, RunConfig, SweepPrior};

/// Bump on any change to a report shape.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSummary {
    pub median: f64,
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    /// `None` when split-R-hat is undefined (zero within-chain variance).
    pub rhat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientEntry {
    pub name: String,
    pub median: f64,
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    pub sn_probability: f64,
    pub rhat: Option<f64>,
    pub selected: bool,
    /// Posterior median mapped back to the original covariate scale.
    pub raw_median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataInfo {
    pub response: String,
    pub names: Vec<String>,
    pub n_rows: usize,
    pub n_train: usize,
    pub p: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerInfo {
    pub step_size: f64,
    pub tuner: Option<TunerSummary>,
    pub retuned: bool,
    pub acceptance_rates: Vec<f64>,
    pub chains: usize,
    pub draws_per_chain: usize,
    pub tau_clamped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TunerSummary {
    pub step_size: f64,
    pub acceptance_rate: f64,
    pub iterations: usize,
    pub in_band: bool,
}

impl From<&TunerOutcome> for TunerSummary {
    fn from(t: &TunerOutcome) -> Self {
        Self {
            step_size: t.step_size,
            acceptance_rate: t.acceptance_rate,
            iterations: t.iterations,
            in_band: t.in_band,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Penalties {
    /// EM estimates (eb) or posterior medians (fb).
    pub lambda1: f64,
    pub lambda2: f64,
    pub em: Option<EmTrace>,
    pub lambda1_posterior: Option<ParamSummary>,
    pub lambda2_posterior: Option<ParamSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionInfo {
    pub criterion: SelectionCriterion,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diagnostics {
    pub max_rhat: Option<f64>,
    pub converged: bool,
    pub rhat_threshold: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub n_test: usize,
    pub mspe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitReportJson {
    pub schema_version: u32,
    pub kind: String,
    pub config: RunConfig,
    pub mode: Mode,
    pub data: DataInfo,
    pub sampler: SamplerInfo,
    pub penalties: Penalties,
    pub coefficients: Vec<CoefficientEntry>,
    pub sigma2: ParamSummary,
    pub selection: SelectionInfo,
    pub diagnostics: Diagnostics,
    pub normal_approx: Option<NormalApprox>,
    pub prediction: Option<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateReportJson {
    pub schema_version: u32,
    pub kind: String,
    pub config: RunConfig,
    pub method: Method,
    pub design: SimDesign,
    pub replications: usize,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkCell {
    pub n: usize,
    pub error: String,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkReportJson {
    pub schema_version: u32,
    pub kind: String,
    pub config: RunConfig,
    pub cells: Vec<BenchmarkCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneReportJson {
    pub schema_version: u32,
    pub kind: String,
    pub config: RunConfig,
    /// `data` for an input file, otherwise the simulation design name.
    pub target: String,
    pub outcome: TunerOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosedParam {
    pub name: String,
    pub summary: ParamSummary,
    pub sn_probability: f64,
    /// Selection decision; `None` for the non-coefficient columns.
    pub selected: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseReportJson {
    pub schema_version: u32,
    pub kind: String,
    pub config: RunConfig,
    pub chains: usize,
    pub draws_per_chain: usize,
    pub parameters: Vec<DiagnosedParam>,
    pub selection: SelectionInfo,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityRow {
    pub first: f64,
    pub second: f64,
    pub medians: Vec<f64>,
    pub max_rhat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityReportJson {
    pub schema_version: u32,
    pub kind: String,
    pub config: RunConfig,
    pub sweep: SweepPrior,
    /// Names of the two varied hyperparameters.
    pub axes: [String; 2],
    pub names: Vec<String>,
    pub rows: Vec<SensitivityRow>,
}

/// `None` for non-finite values, which JSON cannot carry.
pub fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(report: &T) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report types serialize");
    s.push('\n');
    s
}

fn check<T: for<'de> Deserialize<'de>>(v: Value) -> Result<T, String> {
    serde_json::from_value(v).map_err(|e| e.to_string())
}

/// Checks a report against the current schema: version, kind, field set and
/// the cross-field shape invariants. Returns the report kind.
pub fn validate_report(text: &str) -> Result<String, String> {
    let v: Value = serde_json::from_str(text).map_err(|e| format!("not JSON: {e}"))?;
    let version = v.get("schema_version").and_then(Value::as_u64);
    if version != Some(SCHEMA_VERSION as u64) {
        return Err(format!("schema_version {version:?}, expected {SCHEMA_VERSION}"));
    }
    let kind = v.get("kind").and_then(Value::as_str).ok_or("missing kind")?.to_string();
    match kind.as_str() {
        "fit" => {
            let r: FitReportJson = check(v)?;
            let p = r.data.p;
            if r.coefficients.len() != p || r.data.names.len() != p {
                return Err(format!("{} coefficient entries for p = {p}", r.coefficients.len()));
            }
            if r.sampler.acceptance_rates.len() != r.sampler.chains {
                return Err("one acceptance rate per chain expected".into());
            }
            if r.coefficients.iter().any(|c| !(c.lower <= c.median && c.median <= c.upper)) {
                return Err("coefficient interval does not bracket its median".into());
            }
        }
        "simulate" => {
            let r: SimulateReportJson = check(v)?;
            let e = &r.eval;
            if e.mspe_per_replication.len() != r.replications || e.max_rhat_per_replication.len() != r.replications {
                return Err("one MSPE and one R-hat entry per replication expected".into());
            }
            if e.exclusion_frequency.len() != r.design.theta_true.len() {
                return Err("one exclusion frequency per coefficient expected".into());
            }
        }
        "benchmark" => {
            check::<BenchmarkReportJson>(v)?;
        }
        "tune" => {
            let r: TuneReportJson = check(v)?;
            if r.outcome.trace.len() != r.outcome.iterations {
                return Err("tuner trace length differs from its iteration count".into());
            }
        }
        "diagnose" => {
            let r: DiagnoseReportJson = check(v)?;
            if r.parameters.is_empty() {
                return Err("no parameters".into());
            }
        }
        "sensitivity" => {
            let r: SensitivityReportJson = check(v)?;
            if r.rows.iter().any(|row| row.medians.len() != r.names.len()) {
                return Err("one median per coefficient expected".into());
            }
        }
        other => return Err(format!("unknown kind {other}")),
    }
    Ok(kind)
}
