//! CSV ingestion and emission, JSON report shapes and the text summary table.
//!
//! Input CSV: one row per captured individual. Captures come either from a
//! `d` column (count in `1..=K`) or from binary occasion columns
//! `occ1..occK`. Remaining columns are covariates unless named `id`. An
//! intercept is prepended automatically; a column literally named
//! `intercept` is accepted but must be 1 on every row. Missing markers are
//! the empty string, `NA` and `.`.

use std::io::{Read, Write};

use serde::Serialize;

use crate::asymptotics::WaldInterval;
use crate::error::{Error, Result};
use crate::estimator::{FitDiagnostics, FitResult, IntervalResult, LrtResult};
use crate::model::{CaptureDataset, Family, Record};
use crate::simulation::MetricsReport;

pub const SCHEMA_VERSION: &str = "1.0";

pub const MISSING_MARKERS: [&str; 3] = ["", "NA", "."];

pub fn is_missing(field: &str) -> bool {
    MISSING_MARKERS.contains(&field.trim())
}

#[derive(Debug, Clone, Default)]
pub struct CsvOptions {
    pub family: Option<Family>,
    /// Number of occasions; required for the `d` schema, checked against the
    /// column count for the occasion schema.
    pub occasions: Option<usize>,
    pub always_observed: Option<String>,
    /// Covariate columns to use, in order. Defaults to every remaining column.
    pub covariates: Option<Vec<String>>,
}

/// A dataset plus the names needed to label coefficients and write it back.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub dataset: CaptureDataset,
    pub family: Family,
    /// Coefficient labels, starting with `intercept`.
    pub beta_names: Vec<String>,
    pub always_observed: Option<String>,
}

impl LabeledDataset {
    /// Covariate columns stored in the file, excluding intercept and the
    /// always-observed column.
    pub fn covariate_columns(&self) -> &[String] {
        let skip = if self.family == Family::Extended { 2 } else { 1 };
        &self.beta_names[skip..]
    }

    pub fn missing_fraction(&self) -> f64 {
        let n = self.dataset.n();
        if n == 0 {
            0.0
        } else {
            (n - self.dataset.m()) as f64 / n as f64
        }
    }
}

fn csv_err(line: usize, message: impl Into<String>) -> Error {
    Error::Csv { row: line, message: message.into() }
}

fn occasion_index(name: &str) -> Option<usize> {
    name.strip_prefix("occ").and_then(|s| s.parse::<usize>().ok())
}

enum CaptureSchema {
    Count(usize),
    Occasions(Vec<usize>),
}

pub fn ingest_csv(path: &std::path::Path, opts: &CsvOptions) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, opts)
}

/// Parses a capture CSV. Error rows are file line numbers (header = line 1).
pub fn read_csv<R: Read>(reader: R, opts: &CsvOptions) -> Result<LabeledDataset> {
    let family = opts.family.unwrap_or(Family::Base);
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(false).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.to_string()).collect();
    let find = |name: &str| header.iter().position(|h| h == name);

    let schema = if let Some(c) = find("d") {
        if header.iter().any(|h| occasion_index(h).is_some()) {
            return Err(csv_err(1, "both a `d` column and occasion columns are present"));
        }
        CaptureSchema::Count(c)
    } else {
        let mut occ: Vec<(usize, usize)> =
            header.iter().enumerate().filter_map(|(c, h)| occasion_index(h).map(|k| (k, c))).collect();
        if occ.is_empty() {
            return Err(csv_err(1, "need a `d` column or occasion columns occ1..occK"));
        }
        occ.sort();
        if occ.iter().enumerate().any(|(i, (k, _))| *k != i + 1) {
            return Err(csv_err(1, "occasion columns must be occ1..occK without gaps"));
        }
        CaptureSchema::Occasions(occ.into_iter().map(|(_, c)| c).collect())
    };
    let occasions = match (&schema, opts.occasions) {
        (CaptureSchema::Count(_), Some(k)) => k,
        (CaptureSchema::Count(_), None) => {
            return Err(Error::InvalidData("the `d` schema needs the number of occasions (--k)".into()))
        }
        (CaptureSchema::Occasions(cols), Some(k)) if k != cols.len() => {
            return Err(Error::InvalidData(format!("--k {k} but the file has {} occasion columns", cols.len())))
        }
        (CaptureSchema::Occasions(cols), _) => cols.len(),
    };

    let x_col = match (&opts.always_observed, family) {
        (Some(name), _) => {
            Some(find(name).ok_or_else(|| csv_err(1, format!("always-observed column `{name}` not found")))?)
        }
        (None, Family::Extended) => return Err(Error::MissingAlwaysObserved),
        (None, Family::Base) => None,
    };
    let intercept_col = header.iter().position(|h| h.eq_ignore_ascii_case("intercept"));

    let reserved = |c: usize, h: &str| {
        Some(c) == x_col
            || Some(c) == intercept_col
            || h == "d"
            || h == "id"
            || occasion_index(h).is_some()
    };
    let cov_cols: Vec<usize> = match &opts.covariates {
        Some(names) => names
            .iter()
            .map(|n| match find(n) {
                Some(c) if !reserved(c, n) => Ok(c),
                Some(_) => Err(csv_err(1, format!("column `{n}` cannot be used as a covariate"))),
                None => Err(csv_err(1, format!("covariate column `{n}` not found"))),
            })
            .collect::<Result<_>>()?,
        None => header.iter().enumerate().filter(|(c, h)| !reserved(*c, h)).map(|(c, _)| c).collect(),
    };

    let mut beta_names = vec!["intercept".to_string()];
    if family == Family::Extended {
        beta_names.push(opts.always_observed.clone().expect("checked above"));
    }
    beta_names.extend(cov_cols.iter().map(|&c| header[c].clone()));

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| csv_err(line, e.to_string()))?;
        let field = |c: usize| row.get(c).unwrap_or("");
        let number = |c: usize| -> Result<f64> {
            field(c).parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                csv_err(line, format!("column `{}`: `{}` is not a finite number", header[c], field(c)))
            })
        };

        let d = match &schema {
            CaptureSchema::Count(c) => {
                if is_missing(field(*c)) {
                    return Err(csv_err(line, "capture count is missing"));
                }
                field(*c)
                    .parse::<usize>()
                    .map_err(|_| csv_err(line, format!("capture count `{}` is not a non-negative integer", field(*c))))?
            }
            CaptureSchema::Occasions(cols) => {
                let mut d = 0;
                for &c in cols {
                    match field(c) {
                        "0" => {}
                        "1" => d += 1,
                        v => return Err(csv_err(line, format!("column `{}`: occasion value `{v}` is not 0 or 1", header[c]))),
                    }
                }
                d
            }
        };
        if d == 0 {
            return Err(csv_err(line, "individual was never captured (d = 0)"));
        }
        if d > occasions {
            return Err(csv_err(line, format!("capture count {d} exceeds the {occasions} occasions")));
        }

        if let Some(c) = intercept_col {
            if is_missing(field(c)) {
                return Err(csv_err(line, "the intercept cannot be missing"));
            }
            if number(c)? != 1.0 {
                return Err(csv_err(line, "intercept column must equal 1"));
            }
        }

        let x = match x_col {
            Some(c) => {
                if is_missing(field(c)) {
                    return Err(csv_err(line, format!("always-observed column `{}` is missing", header[c])));
                }
                match number(c)? {
                    0.0 => Some(0u8),
                    1.0 => Some(1u8),
                    v => return Err(csv_err(line, format!("always-observed value {v} is not 0 or 1"))),
                }
            }
            None => None,
        };

        // any missing covariate makes the whole vector missing
        let covariates = if cov_cols.iter().any(|&c| is_missing(field(c))) {
            None
        } else {
            let mut z = Vec::with_capacity(beta_names.len());
            z.push(1.0);
            if family == Family::Extended {
                z.push(x.expect("extended family has x") as f64);
            }
            for &c in &cov_cols {
                z.push(number(c)?);
            }
            Some(z)
        };
        records.push(Record { captures: d, covariates, always_observed: x });
    }
    let dataset = CaptureDataset::new(occasions, records)?;
    Ok(LabeledDataset { dataset, family, beta_names, always_observed: opts.always_observed.clone() })
}

/// Writes the canonical `d` schema; `read_csv` with matching options reads it back unchanged.
pub fn write_csv<W: Write>(writer: W, data: &LabeledDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let covs = data.covariate_columns();
    let mut header = vec!["d".to_string()];
    header.extend(data.always_observed.iter().cloned());
    header.extend(covs.iter().cloned());
    w.write_record(&header)?;
    let skip = data.beta_names.len() - covs.len();
    for r in data.dataset.records() {
        let mut row = vec![r.captures.to_string()];
        if data.always_observed.is_some() {
            let x = r.always_observed.ok_or(Error::MissingAlwaysObserved)?;
            row.push(x.to_string());
        }
        match &r.covariates {
            Some(z) => row.extend(z[skip..].iter().map(|v| v.to_string())),
            None => row.extend(covs.iter().map(|_| "NA".to_string())),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Names a simulated dataset (`x` for the binary covariate, `y` for the
/// continuous one) so it can be written out.
pub fn label_generated(dataset: CaptureDataset) -> LabeledDataset {
    let extended = dataset.has_always_observed();
    let family = if extended { Family::Extended } else { Family::Base };
    let mut beta_names = vec!["intercept".to_string()];
    if extended {
        beta_names.push("x".into());
    }
    let covs = dataset.dim().saturating_sub(beta_names.len()).max(1);
    for j in 0..covs {
        beta_names.push(if covs == 1 { "y".into() } else { format!("y{}", j + 1) });
    }
    let always_observed = extended.then(|| "x".to_string());
    LabeledDataset { dataset, family, beta_names, always_observed }
}

#[derive(Debug, Clone, Serialize)]
pub struct CiReport {
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
    pub lower_at_n: bool,
    /// The search hit the abundance cap; `upper` is the cap, not a root.
    pub upper_capped: bool,
}

impl From<&IntervalResult> for CiReport {
    fn from(ci: &IntervalResult) -> Self {
        CiReport {
            level: ci.level,
            lower: ci.lower,
            upper: ci.upper,
            lower_at_n: ci.lower_at_n,
            upper_capped: ci.upper_capped,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceReport {
    pub condition_number: f64,
    pub near_singular: bool,
    /// `[W^-1]_11`, the asymptotic variance of `sqrt(nu0) log(nu_hat / nu0)`.
    pub w_inv_11: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport {
    pub converged: bool,
    #[serde(flatten)]
    pub fit: FitDiagnostics,
    pub variance: Option<VarianceReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BaselineReport {
    pub method: String,
    pub n: usize,
    pub nu_hat: f64,
    pub nu_hat_rounded: u64,
    pub beta_hat: Vec<f64>,
    pub loglik: f64,
    pub ci: Option<CiReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TestReport {
    pub coefficient: String,
    pub index: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub loglik_full: f64,
    pub loglik_null: f64,
    pub nu_hat_null: f64,
    pub beta_hat_null: Vec<f64>,
}

impl TestReport {
    pub fn new(name: &str, lrt: &LrtResult) -> Self {
        TestReport {
            coefficient: name.to_string(),
            index: lrt.coefficient,
            statistic: lrt.statistic,
            p_value: lrt.p_value,
            loglik_full: lrt.loglik_full,
            loglik_null: lrt.loglik_null,
            nu_hat_null: lrt.nu_hat_null,
            beta_hat_null: lrt.beta_hat_null.clone(),
        }
    }
}

/// Output of `fit` and `test`.
#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub schema_version: &'static str,
    pub command: String,
    pub model: Family,
    pub occasions: usize,
    pub n: usize,
    pub m: usize,
    pub missing_fraction: f64,
    pub beta_names: Vec<String>,
    pub nu_hat: f64,
    pub nu_hat_rounded: u64,
    pub beta_hat: Vec<f64>,
    pub alpha_cells: Vec<String>,
    pub alpha_hat: Vec<f64>,
    pub loglik: f64,
    /// Interval at the first requested level.
    pub ci: CiReport,
    /// Intervals at every requested level.
    pub intervals: Vec<CiReport>,
    pub diagnostics: DiagnosticsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub complete_case: Option<BaselineReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wald: Option<WaldInterval>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<TestReport>,
}

pub fn round_nu(nu: f64) -> u64 {
    nu.round().max(0.0) as u64
}

impl FitReport {
    pub fn new(command: &str, data: &LabeledDataset, fit: &FitResult, intervals: &[IntervalResult]) -> Self {
        let intervals: Vec<CiReport> = intervals.iter().map(CiReport::from).collect();
        FitReport {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            model: fit.family,
            occasions: data.dataset.occasions(),
            n: fit.n,
            m: fit.m,
            missing_fraction: data.missing_fraction(),
            beta_names: data.beta_names.clone(),
            nu_hat: fit.nu_hat,
            nu_hat_rounded: round_nu(fit.nu_hat),
            beta_hat: fit.beta_hat.clone(),
            alpha_cells: fit.cells.clone(),
            alpha_hat: fit.alpha_hat.clone(),
            loglik: fit.loglik,
            ci: intervals[0].clone(),
            intervals,
            diagnostics: DiagnosticsReport {
                converged: fit.converged(),
                fit: fit.diagnostics.clone(),
                variance: None,
            },
            complete_case: None,
            wald: None,
            test: None,
        }
    }

    /// Layout of the usual summary table: model, method, estimate of nu,
    /// interval, estimate of beta.
    pub fn table(&self) -> String {
        let fmt_beta = |b: &[f64]| format!("({})", b.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", "));
        let fmt_ci = |c: &CiReport| {
            let upper = if c.upper_capped { format!(">{:.0}", c.upper) } else { format!("{:.0}", c.upper.round()) };
            format!("[{:.0}, {upper}]", c.lower.round())
        };
        let pct = |l: f64| {
            let s = format!("{:.1}", 100.0 * l);
            s.trim_end_matches(".0").to_string()
        };
        let mut rows: Vec<[String; 5]> = vec![[
            "Model".into(),
            "Method".into(),
            "Estimate of nu".into(),
            format!("{}% CI of nu", pct(self.ci.level)),
            format!("Estimate of beta {}", fmt_beta_names(&self.beta_names)),
        ]];
        let model = format!("{} (K={})", self.model, self.occasions);
        rows.push([
            model,
            "Proposed".into(),
            self.nu_hat_rounded.to_string(),
            fmt_ci(&self.ci),
            fmt_beta(&self.beta_hat),
        ]);
        if let Some(w) = &self.wald {
            rows.push([
                String::new(),
                "Wald (log nu)".into(),
                self.nu_hat_rounded.to_string(),
                format!("[{:.0}, {:.0}]", w.lower.round(), w.upper.round()),
                "-".into(),
            ]);
        }
        if let Some(cc) = &self.complete_case {
            rows.push([
                String::new(),
                cc.method.clone(),
                cc.nu_hat_rounded.to_string(),
                cc.ci.as_ref().map(fmt_ci).unwrap_or_else(|| "-".into()),
                fmt_beta(&cc.beta_hat),
            ]);
        }
        let widths: Vec<usize> = (0..5).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = format!(
            "Point estimates of nu and beta, and {}% confidence intervals of nu\n(n = {}, complete = {}, missing = {:.1}%)\n",
            pct(self.ci.level),
            self.n,
            self.m,
            100.0 * self.missing_fraction
        );
        for (i, r) in rows.iter().enumerate() {
            let line: Vec<String> = r.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 8));
                out.push('\n');
            }
        }
        for c in &self.intervals[1..] {
            out.push_str(&format!("{}% CI of nu: {}\n", pct(c.level), fmt_ci(c)));
        }
        if let Some(t) = &self.test {
            out.push_str(&format!(
                "EL ratio test of H0: beta_{} = 0: statistic {:.2}, p-value {:.4}\n",
                t.coefficient, t.statistic, t.p_value
            ));
        }
        if !self.diagnostics.converged {
            out.push_str("warning: optimizer did not converge\n");
        }
        out
    }
}

fn fmt_beta_names(names: &[String]) -> String {
    format!("({})", names.join(", "))
}

/// Output of `simulate`.
#[derive(Debug, Clone, Serialize)]
pub struct SimulationReport {
    pub schema_version: &'static str,
    pub command: String,
    /// Kolmogorov-Smirnov distance of the `R'(nu0)` sample from chi-square(1).
    pub ks_chi2_1: Option<f64>,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

impl SimulationReport {
    pub fn new(metrics: MetricsReport) -> Self {
        let ks = (!metrics.r_prime_nu0.is_empty()).then(|| crate::simulation::ks_chi2_1(&metrics.r_prime_nu0));
        SimulationReport { schema_version: SCHEMA_VERSION, command: "simulate".into(), ks_chi2_1: ks, metrics }
    }

    pub fn summary(&self) -> String {
        let m = &self.metrics;
        let mut out = format!(
            "Scenario {} nu0={} K={}: {} replications, {} failed, mean n {:.1}, mean m {:.1}\n",
            m.config.label, m.config.nu0, m.config.occasions, m.replications, m.failures, m.mean_n, m.mean_m
        );
        let p = &m.proposed;
        out.push_str(&format!(
            "Proposed       bias {:>9.3} (se {:.3})  RMSE {:>9.3}  capped {}\n",
            p.bias, p.bias_se, p.rmse, p.at_cap
        ));
        if let Some(c) = &m.complete_case {
            out.push_str(&format!("Complete-case  bias {:>9.3} (se {:.3})  RMSE {:>9.3}\n", c.bias, c.bias_se, c.rmse));
        }
        for l in &m.levels {
            out.push_str(&format!(
                "level {:.2}: two-sided {:.4} (se {:.4})  lower limit {:.4}  upper limit {:.4}\n",
                l.level, l.two_sided.rate, l.two_sided.se, l.lower_limit.rate, l.upper_limit.rate
            ));
        }
        if let Some(v) = &m.variance {
            out.push_str(&format!(
                "variance of sqrt(nu0) log(nu_hat/nu0): empirical {:.4}, mean W^-1[1,1] {:.4}, ratio {:.3}\n",
                v.empirical, v.mean_w_inv_11, v.ratio
            ));
        }
        if let Some(ks) = self.ks_chi2_1 {
            out.push_str(&format!("KS distance of R'(nu0) from chi2(1): {ks:.4}\n"));
        }
        out
    }
}

pub fn write_qq_csv<W: Write>(writer: W, points: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["empirical", "chi2_1"])?;
    for (e, t) in points {
        w.write_record([e.to_string(), t.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}
