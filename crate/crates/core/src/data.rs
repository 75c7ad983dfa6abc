//! Standardization, the two simulation designs, delimited-text ingestion and
//! the replicated prediction-error protocol.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dists::{
    derive_seed, sample_mixture_normal, sample_normal, sample_skew_t, sample_student_t, NormalComponent, RngStream,
};
use crate::selection::{select_credible, select_scaled_neighborhood, SelectionConfig, SelectionCriterion};
use crate::{BenelError, Result};

/// Unstandardized design and response.
#[derive(Debug, Clone, PartialEq)]
pub struct RawData {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub names: Vec<String>,
}

impl RawData {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, names: Vec<String>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(BenelError::InvalidInput(format!(
                "design has {} rows, response has {}",
                x.nrows(),
                y.len()
            )));
        }
        if names.len() != x.ncols() {
            return Err(BenelError::InvalidInput("one name per column required".into()));
        }
        Ok(Self { x, y, names })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    fn rows(&self, idx: &[usize]) -> RawData {
        let x = DMatrix::from_fn(idx.len(), self.p(), |i, j| self.x[(idx[i], j)]);
        let y = DVector::from_fn(idx.len(), |i, _| self.y[idx[i]]);
        RawData {
            x,
            y,
            names: self.names.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub x_means: Vec<f64>,
    /// Root sum of squares of each centered training column.
    pub x_scales: Vec<f64>,
    pub y_mean: f64,
}

impl Transform {
    pub fn apply_x(&self, raw_x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(raw_x.nrows(), raw_x.ncols(), |i, j| {
            (raw_x[(i, j)] - self.x_means[j]) / self.x_scales[j]
        })
    }

    /// Predictions on the original response scale from standardized coefficients.
    pub fn predict(&self, raw_x: &DMatrix<f64>, theta: &DVector<f64>) -> DVector<f64> {
        (self.apply_x(raw_x) * theta).add_scalar(self.y_mean)
    }

    /// Coefficients on the original covariate scale.
    pub fn raw_coefficients(&self, theta: &DVector<f64>) -> Vec<f64> {
        theta.iter().zip(&self.x_scales).map(|(t, s)| t / s).collect()
    }
}

/// Standardized data: centered columns with unit sum of squares and a
/// centered response.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub transform: Transform,
    pub names: Vec<String>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }
}

pub fn standardize(raw: &RawData) -> Result<Dataset> {
    let (n, p) = raw.x.shape();
    if n < 2 {
        return Err(BenelError::InvalidInput(format!("need at least 2 observations, got {n}")));
    }
    let mut x_means = Vec::with_capacity(p);
    let mut x_scales = Vec::with_capacity(p);
    for j in 0..p {
        let col = raw.x.column(j);
        let m = col.mean();
        let ss: f64 = col.iter().map(|v| (v - m).powi(2)).sum();
        if !(ss > 1e-12 * (1.0 + m * m) * n as f64) {
            return Err(BenelError::InvalidInput(format!("column '{}' is constant", raw.names[j])));
        }
        x_means.push(m);
        x_scales.push(ss.sqrt());
    }
    let y_mean = raw.y.mean();
    let transform = Transform { x_means, x_scales, y_mean };
    Ok(Dataset {
        x: transform.apply_x(&raw.x),
        y: raw.y.add_scalar(-y_mean),
        transform,
        names: raw.names.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    Sim1,
    Sim2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Normal,
    Mixture,
    SkewT,
    StudentT,
}

/// Error law of a simulation design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum ErrorLaw {
    Normal { sd: f64 },
    /// Equal-weight mixture of `N(-shift, sd^2)` and `N(shift, sd^2)`.
    Mixture { shift: f64, sd: f64 },
    /// Standardized skew Student t times `scale`.
    SkewT { nu: f64, xi: f64, scale: f64 },
    /// Student t with `df` degrees of freedom times `scale`.
    StudentT { df: f64, scale: f64 },
}

impl ErrorLaw {
    /// The law used for `kind` in `design`.
    pub fn standard(design: DesignKind, kind: ErrorKind) -> Self {
        match (design, kind) {
            (DesignKind::Sim1, ErrorKind::Normal) => ErrorLaw::Normal { sd: 3.0 },
            (DesignKind::Sim2, ErrorKind::Normal) => ErrorLaw::Normal { sd: 15.0 },
            (_, ErrorKind::Mixture) => ErrorLaw::Mixture { shift: 3.0, sd: 1.0 },
            (DesignKind::Sim1, ErrorKind::SkewT) => ErrorLaw::SkewT { nu: 30.0, xi: 1.5, scale: 3.0 },
            // No scale is given for the second design; unit scale unless overridden.
            (DesignKind::Sim2, ErrorKind::SkewT) => ErrorLaw::SkewT { nu: 30.0, xi: 1.5, scale: 1.0 },
            (_, ErrorKind::StudentT) => ErrorLaw::StudentT { df: 3.0, scale: 10.0 },
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            ErrorLaw::Normal { sd } => sd * sd,
            ErrorLaw::Mixture { shift, sd } => shift * shift + sd * sd,
            ErrorLaw::SkewT { scale, .. } => scale * scale,
            ErrorLaw::StudentT { df, scale } => {
                if df > 2.0 {
                    scale * scale * df / (df - 2.0)
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    pub fn sample(&self, rng: &mut RngStream) -> Result<f64> {
        match *self {
            ErrorLaw::Normal { sd } => sample_normal(0.0, sd, rng),
            ErrorLaw::Mixture { shift, sd } => sample_mixture_normal(
                &[NormalComponent { mean: -shift, sd }, NormalComponent { mean: shift, sd }],
                &[0.5, 0.5],
                rng,
            ),
            ErrorLaw::SkewT { nu, xi, scale } => Ok(scale * sample_skew_t(nu, xi, rng)?),
            ErrorLaw::StudentT { df, scale } => Ok(scale * sample_student_t(df, rng)?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub kind: DesignKind,
    pub n_train: usize,
    pub n_test: usize,
    pub error: ErrorLaw,
    pub theta_true: Vec<f64>,
    pub replication_seed: u64,
}

impl SimDesign {
    pub fn new(kind: DesignKind, n_train: usize, error_kind: ErrorKind, replication_seed: u64) -> Self {
        Self {
            kind,
            n_train,
            n_test: 400,
            error: ErrorLaw::standard(kind, error_kind),
            theta_true: true_coefficients(kind),
            replication_seed,
        }
    }

    pub fn p(&self) -> usize {
        self.theta_true.len()
    }

    /// Training and test sets of replication `rep`.
    pub fn generate(&self, rep: u64) -> Result<(RawData, RawData)> {
        let mut rng = RngStream::new(derive_seed(self.replication_seed, rep), 0);
        let train = self.draw(self.n_train, &mut rng)?;
        let test = self.draw(self.n_test, &mut rng)?;
        Ok((train, test))
    }

    fn draw(&self, n: usize, rng: &mut RngStream) -> Result<RawData> {
        let x = match self.kind {
            DesignKind::Sim1 => sim1_covariates(n, rng)?,
            DesignKind::Sim2 => sim2_covariates(n, rng)?,
        };
        let theta = DVector::from_column_slice(&self.theta_true);
        let mean = &x * &theta;
        let mut y = mean;
        for v in y.iter_mut() {
            *v += self.error.sample(rng)?;
        }
        let names = (1..=self.p()).map(|j| format!("x{j}")).collect();
        RawData::new(x, y, names)
    }
}

pub fn true_coefficients(kind: DesignKind) -> Vec<f64> {
    match kind {
        DesignKind::Sim1 => vec![3.0, 1.5, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0],
        DesignKind::Sim2 => {
            let mut t = vec![3.0; 15];
            t.extend(std::iter::repeat_n(0.0, 15));
            t
        }
    }
}

/// Correlation matrix with entries `rho^|i-j|`.
pub fn ar1_correlation(p: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

/// Rows i.i.d. normal with correlation `0.5^|i-j|` across 8 covariates.
pub fn sim1_covariates(n: usize, rng: &mut RngStream) -> Result<DMatrix<f64>> {
    let p = 8;
    let chol = ar1_correlation(p, 0.5)
        .cholesky()
        .ok_or_else(|| BenelError::InvalidInput("correlation matrix is not positive definite".into()))?;
    let l = chol.l();
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        let z = DVector::from_fn(p, |_, _| sample_normal(0.0, 1.0, rng).expect("unit normal"));
        let row = &l * z;
        x.row_mut(i).copy_from(&row.transpose());
    }
    Ok(x)
}

/// Three blocks of five near-copies of a shared factor (noise variance 0.01)
/// followed by 15 independent standard normals.
pub fn sim2_covariates(n: usize, rng: &mut RngStream) -> Result<DMatrix<f64>> {
    let mut x = DMatrix::zeros(n, 30);
    for i in 0..n {
        let factors = [
            sample_normal(0.0, 1.0, rng)?,
            sample_normal(0.0, 1.0, rng)?,
            sample_normal(0.0, 1.0, rng)?,
        ];
        for j in 0..15 {
            x[(i, j)] = factors[j / 5] + sample_normal(0.0, 0.1, rng)?;
        }
        for j in 15..30 {
            x[(i, j)] = sample_normal(0.0, 1.0, rng)?;
        }
    }
    Ok(x)
}

/// Simulation-1 training/test sets drawn from `rng`.
pub fn generate_sim1(n: usize, error: ErrorLaw, rng: &mut RngStream) -> Result<(RawData, RawData, Vec<f64>)> {
    let design = SimDesign {
        kind: DesignKind::Sim1,
        n_train: n,
        n_test: 400,
        error,
        theta_true: true_coefficients(DesignKind::Sim1),
        replication_seed: 0,
    };
    let train = design.draw(n, rng)?;
    let test = design.draw(400, rng)?;
    Ok((train, test, design.theta_true))
}

/// Simulation-2 training/test sets drawn from `rng`.
pub fn generate_sim2(n: usize, error: ErrorLaw, rng: &mut RngStream) -> Result<(RawData, RawData, Vec<f64>)> {
    let design = SimDesign {
        kind: DesignKind::Sim2,
        n_train: n,
        n_test: 400,
        error,
        theta_true: true_coefficients(DesignKind::Sim2),
        replication_seed: 0,
    };
    let train = design.draw(n, rng)?;
    let test = design.draw(400, rng)?;
    Ok((train, test, design.theta_true))
}

/// Parses a delimited text file with a header row. Commas separate fields
/// when the header contains one; otherwise any run of whitespace does.
pub fn load_csv(path: impl AsRef<Path>, response_column: &str) -> Result<RawData> {
    let text = std::fs::read_to_string(path)?;
    parse_delimited(&text, response_column)
}

pub fn parse_delimited(text: &str, response_column: &str) -> Result<RawData> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| BenelError::EmptyData("file has no header row".into()))?;
    let comma = header_line.contains(',');
    let split = |l: &str| -> Vec<String> {
        if comma {
            let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(l.as_bytes());
            rdr.records()
                .next()
                .and_then(|r| r.ok())
                .map(|r| r.iter().map(|s| s.trim().to_string()).collect())
                .unwrap_or_default()
        } else {
            l.split_whitespace().map(str::to_string).collect()
        }
    };
    let header: Vec<String> = split(header_line).into_iter().map(|h| h.trim_matches('"').to_string()).collect();
    let resp_idx = header
        .iter()
        .position(|h| h == response_column)
        .ok_or_else(|| BenelError::InvalidInput(format!("response column '{response_column}' not in header")))?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut missing = Vec::new();
    for (lineno, line) in lines {
        let fields = split(line);
        if fields.len() != header.len() {
            return Err(BenelError::Parse {
                line: lineno + 1,
                column: fields.len().min(header.len()) + 1,
                message: format!("expected {} fields, found {}", header.len(), fields.len()),
            });
        }
        let mut row = Vec::with_capacity(fields.len());
        let mut has_missing = false;
        for (col, f) in fields.iter().enumerate() {
            let f = f.trim_matches('"');
            if f.is_empty() || f.eq_ignore_ascii_case("na") || f.eq_ignore_ascii_case("nan") {
                has_missing = true;
                row.push(f64::NAN);
                continue;
            }
            let v: f64 = f.parse().map_err(|_| BenelError::Parse {
                line: lineno + 1,
                column: col + 1,
                message: format!("'{f}' is not a number"),
            })?;
            row.push(v);
        }
        if has_missing {
            missing.push(lineno + 1);
        }
        rows.push(row);
    }
    if !missing.is_empty() {
        return Err(BenelError::MissingValues { rows: missing });
    }
    if rows.is_empty() {
        return Err(BenelError::EmptyData("file has a header but no data rows".into()));
    }
    let n = rows.len();
    let p = header.len() - 1;
    let cols: Vec<usize> = (0..header.len()).filter(|&c| c != resp_idx).collect();
    let x = DMatrix::from_fn(n, p, |i, j| rows[i][cols[j]]);
    let y = DVector::from_fn(n, |i, _| rows[i][resp_idx]);
    let names = cols.iter().map(|&c| header[c].clone()).collect();
    RawData::new(x, y, names)
}

/// Random train/test split: `n_train` rows for training, the rest for testing.
pub fn split(raw: &RawData, n_train: usize, rng: &mut RngStream) -> Result<(RawData, RawData)> {
    if n_train == 0 || n_train >= raw.n() {
        return Err(BenelError::InvalidInput(format!(
            "training size must lie in 1..{}, got {n_train}",
            raw.n()
        )));
    }
    let mut idx: Vec<usize> = (0..raw.n()).collect();
    idx.shuffle(rng);
    let (train, test) = idx.split_at(n_train);
    Ok((raw.rows(train), raw.rows(test)))
}

/// What a fitting procedure hands back for one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationFit {
    /// Point estimate on the standardized scale (posterior median for Bayesian fits).
    pub coefficients: Vec<f64>,
    /// Pooled posterior draws on the standardized scale; empty for point predictors.
    pub draws: Vec<Vec<f64>>,
    pub max_rhat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mspe_per_replication: Vec<f64>,
    pub mmspe: f64,
    pub se_bootstrap: f64,
    /// Percentage of replications excluding each coefficient.
    pub exclusion_frequency: Vec<f64>,
    pub max_rhat_per_replication: Vec<Option<f64>>,
    /// Replications whose chains did not reach split-R-hat < 1.01.
    pub unconverged_replications: usize,
    pub degenerate_se: bool,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Standard deviation of the median over `resamples` bootstrap resamples.
pub fn bootstrap_se_of_median(values: &[f64], resamples: usize, rng: &mut RngStream) -> f64 {
    use rand::Rng;
    let n = values.len();
    if n < 2 || resamples < 2 {
        return 0.0;
    }
    let meds: Vec<f64> = (0..resamples)
        .map(|_| {
            let s: Vec<f64> = (0..n).map(|_| values[rng.random_range(0..n)]).collect();
            median(&s)
        })
        .collect();
    let m = meds.iter().sum::<f64>() / resamples as f64;
    (meds.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (resamples - 1) as f64).sqrt()
}

/// Runs `n_reps` replications of `design`: generate, standardize, fit,
/// select, predict on the test set and score. `fit` receives the
/// standardized training data and a per-replication seed.
pub fn evaluate_replications<F>(
    design: &SimDesign,
    fit: F,
    n_reps: usize,
    selection: &SelectionConfig,
) -> Result<EvalReport>
where
    F: Fn(&Dataset, u64) -> Result<ReplicationFit> + Sync,
{
    if n_reps == 0 {
        return Err(BenelError::InvalidInput("need at least one replication".into()));
    }
    let per_rep: Vec<Result<(f64, Vec<bool>, Option<f64>)>> = (0..n_reps as u64)
        .into_par_iter()
        .map(|rep| {
            let (train, test) = design.generate(rep)?;
            let data = standardize(&train)?;
            let out = fit(&data, derive_seed(design.replication_seed ^ 0x5EED, rep))?;
            let p = data.p();
            let excluded = if out.draws.is_empty() {
                vec![false; p]
            } else {
                let sel = match selection.criterion {
                    SelectionCriterion::CredibleInterval => select_credible(&out.draws, selection.level)?,
                    SelectionCriterion::ScaledNeighborhood => select_scaled_neighborhood(&out.draws, selection.level)?,
                };
                sel.included.iter().map(|inc| !inc).collect()
            };
            let coef = DVector::from_fn(p, |j, _| if excluded[j] { 0.0 } else { out.coefficients[j] });
            let pred = data.transform.predict(&test.x, &coef);
            let mspe = (&test.y - pred).norm_squared() / test.n() as f64;
            Ok((mspe, excluded, out.max_rhat))
        })
        .collect();

    let mut mspe = Vec::with_capacity(n_reps);
    let mut excl_counts = vec![0usize; design.p()];
    let mut rhats = Vec::with_capacity(n_reps);
    for r in per_rep {
        let (m, ex, rh) = r?;
        mspe.push(m);
        for (c, e) in excl_counts.iter_mut().zip(ex) {
            *c += e as usize;
        }
        rhats.push(rh);
    }
    let unconverged = rhats.iter().filter(|r| r.is_some_and(|v| !(v < 1.01))).count();
    if unconverged > 0 {
        log::warn!("{unconverged} of {n_reps} replications have split-R-hat >= 1.01");
    }
    let mut boot_rng = RngStream::new(design.replication_seed, 0xB007);
    let se = bootstrap_se_of_median(&mspe, 1000, &mut boot_rng);
    Ok(EvalReport {
        mmspe: median(&mspe),
        se_bootstrap: se,
        exclusion_frequency: excl_counts.iter().map(|&c| 100.0 * c as f64 / n_reps as f64).collect(),
        degenerate_se: n_reps < 2 || se == 0.0,
        mspe_per_replication: mspe,
        max_rhat_per_replication: rhats,
        unconverged_replications: unconverged,
    })
}
