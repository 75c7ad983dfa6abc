//! Draw and trace tables. Files are assembled in memory and written only
//! after every computation has succeeded, so a failed run leaves no partial
//! outputs behind.

use std::path::{Path, PathBuf};

use benel::hmc::TunerOutcome;

use crate::error::{io_error, CliError};

/// 17 significant digits, enough to round-trip an `f64`.
pub fn full(v: f64) -> String {
    format!("{v:.16e}")
}

/// Named file contents awaiting a successful run.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(String, String)>,
}

impl Outputs {
    pub fn add(&mut self, name: impl Into<String>, contents: String) {
        self.files.push((name.into(), contents));
    }

    /// Creates `dir` and writes every file. Returns the written paths.
    pub fn write(self, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| io_error("cannot create", dir, e))?;
        let mut written = Vec::with_capacity(self.files.len());
        for (name, contents) in self.files {
            let path = dir.join(name);
            std::fs::write(&path, contents).map_err(|e| io_error("cannot write", &path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

fn csv_text(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV of UTF-8 fields")
}

/// Per-chain columns of a fit, post burn-in.
pub struct DrawTable<'a> {
    pub names: &'a [String],
    pub burnin: usize,
    /// `theta[chain][draw][j]`.
    pub theta: &'a [Vec<Vec<f64>>],
    pub sigma2: &'a [Vec<f64>],
    pub lambda1: &'a [Vec<f64>],
    pub lambda2: &'a [Vec<f64>],
}

/// `chain, iter, theta..., sigma2, lambda1, lambda2`; chains are 1-based and
/// `iter` counts from the start of the chain, burn-in included.
pub fn draws_csv(t: &DrawTable) -> String {
    let mut header = vec!["chain".to_string(), "iter".to_string()];
    header.extend(t.names.iter().cloned());
    header.extend(["sigma2", "lambda1", "lambda2"].map(String::from));
    let rows = t.theta.iter().enumerate().flat_map(move |(c, chain)| {
        chain.iter().enumerate().map(move |(k, th)| {
            let mut row = vec![(c + 1).to_string(), (t.burnin + k + 1).to_string()];
            row.extend(th.iter().map(|v| full(*v)));
            row.push(full(t.sigma2[c][k]));
            row.push(full(t.lambda1[c][k]));
            row.push(full(t.lambda2[c][k]));
            row
        })
    });
    csv_text(&header, rows)
}

/// `iteration, omega, epsilon, acceptance_rate, branch`.
pub fn tuner_trace_csv(out: Option<&TunerOutcome>) -> String {
    let header = ["iteration", "omega", "epsilon", "acceptance_rate", "branch"].map(String::from);
    let rows = out.into_iter().flat_map(|o| &o.trace).map(|r| {
        vec![
            r.iteration.to_string(),
            full(r.step_size),
            full(r.increment),
            full(r.acceptance_rate),
            serde_json::to_value(r.branch).expect("enum serializes").as_str().unwrap_or_default().to_string(),
        ]
    });
    csv_text(&header, rows)
}

/// Draws read back from a draws table.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedDraws {
    pub columns: Vec<String>,
    /// `draws[chain][draw][column]`, chains in order of first appearance.
    pub draws: Vec<Vec<Vec<f64>>>,
}

pub fn parse_draws_csv(path: &Path) -> Result<ParsedDraws, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error("cannot read", path, e))?;
    let parse_err = |line: usize, msg: String| {
        CliError::Core(benel::BenelError::Parse {
            line,
            column: 1,
            message: msg,
        })
    };
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if header.len() < 3 || header[0] != "chain" || header[1] != "iter" {
        return Err(parse_err(1, "expected a header starting with chain,iter".into()));
    }
    let columns = header[2..].to_vec();
    let mut chain_ids: Vec<String> = Vec::new();
    let mut draws: Vec<Vec<Vec<f64>>> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        let id = rec.get(0).unwrap_or_default().to_string();
        let values = rec
            .iter()
            .skip(2)
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| parse_err(line, e.to_string()))?;
        if values.len() != columns.len() {
            return Err(parse_err(line, format!("{} values for {} columns", values.len(), columns.len())));
        }
        let c = match chain_ids.iter().position(|x| *x == id) {
            Some(c) => c,
            None => {
                chain_ids.push(id);
                draws.push(Vec::new());
                draws.len() - 1
            }
        };
        draws[c].push(values);
    }
    if draws.is_empty() {
        return Err(CliError::Core(benel::BenelError::EmptyData(format!("{} has no draws", path.display()))));
    }
    Ok(ParsedDraws { columns, draws })
}
