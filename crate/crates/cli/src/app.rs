use std::fs;
use std::path::PathBuf;

use capture_el::asymptotics::{estimate_w, wald_interval_lognu};
use capture_el::estimator::{Estimator, FitOptions};
use capture_el::io::{
    ingest_csv, round_nu, to_json, write_qq_csv, BaselineReport, CiReport, CsvOptions, FitReport,
    LabeledDataset, SimulationReport, TestReport, VarianceReport,
};
use capture_el::model::Family;
use capture_el::simulation::{ks_chi2_1, qq_export, run_study, Scenario, ScenarioConfig};

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Optimization(String),
}

impl AppError {
    pub fn exit_code(&self) -> u8 {
        match self {
            AppError::Data(_) => 2,
            AppError::Optimization(_) => 3,
        }
    }
}

impl From<capture_el::Error> for AppError {
    fn from(e: capture_el::Error) -> Self {
        if e.is_data_error() {
            AppError::Data(e.to_string())
        } else {
            AppError::Optimization(e.to_string())
        }
    }
}

fn io_err(path: &std::path::Path) -> impl Fn(std::io::Error) -> AppError + '_ {
    move |e| AppError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Fit,
    Test,
    Simulate,
    Qq,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    pub data: Option<PathBuf>,
    pub family: Family,
    pub occasions: Option<usize>,
    pub levels: Vec<f64>,
    pub always_observed: Option<String>,
    pub covariates: Option<Vec<String>>,
    pub coef: Option<String>,
    pub scenario: Option<Scenario>,
    pub nu0: usize,
    pub reps: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub qq_out: Option<PathBuf>,
    pub complete_case: bool,
    pub wald: bool,
    pub quiet: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), AppError> {
        let bad = |m: String| Err(AppError::Data(m));
        if self.levels.is_empty() {
            return bad("at least one --level is needed".into());
        }
        for &l in &self.levels {
            let ok = match self.command {
                Command::Simulate => l > 0.5 && l < 1.0,
                _ => l > 0.0 && l < 1.0,
            };
            if !ok {
                return bad(format!("confidence level {l} is out of range"));
            }
        }
        match self.command {
            Command::Fit | Command::Test => {
                if self.data.is_none() {
                    return bad("--data is required".into());
                }
                if self.family == Family::Extended && self.always_observed.is_none() {
                    return bad("--model extended needs --always-observed <col>".into());
                }
            }
            Command::Simulate => {
                if self.scenario.is_none() {
                    return bad("--scenario is required".into());
                }
            }
            Command::Qq => {
                if self.data.is_none() && self.scenario.is_none() {
                    return bad("qq needs --data <simulate report> or --scenario".into());
                }
            }
        }
        if matches!(self.command, Command::Simulate | Command::Qq) && (self.nu0 < 1 || self.reps < 1) {
            return bad("--nu0 and --reps must be at least 1".into());
        }
        Ok(())
    }
}

/// Text destined for stdout plus the process exit code.
#[derive(Debug)]
pub struct Outcome {
    pub stdout: String,
    pub code: u8,
}

pub fn run(cfg: &RunConfig) -> Result<Outcome, AppError> {
    cfg.validate()?;
    match cfg.command {
        Command::Fit | Command::Test => fit(cfg),
        Command::Simulate => simulate(cfg),
        Command::Qq => qq(cfg),
    }
}

/// JSON goes to `--out` when given (the text summary to stdout), otherwise
/// the JSON itself is the stdout payload.
fn emit(cfg: &RunConfig, json: String, text: String) -> Result<String, AppError> {
    match &cfg.out {
        Some(p) => {
            fs::write(p, json + "\n").map_err(io_err(p))?;
            Ok(if cfg.quiet { String::new() } else { text })
        }
        None => {
            if !cfg.quiet {
                eprint!("{text}");
            }
            Ok(json + "\n")
        }
    }
}

fn coefficient_index(cfg: &RunConfig, data: &LabeledDataset) -> Result<(usize, String), AppError> {
    let names = &data.beta_names;
    let wanted = match (&cfg.coef, cfg.family, &cfg.always_observed) {
        (Some(c), _, _) => c.clone(),
        (None, Family::Extended, Some(x)) => x.clone(),
        (None, _, _) if names.len() == 2 => names[1].clone(),
        _ => return Err(AppError::Data("choose the coefficient to test with --coef <name>".into())),
    };
    let j = match names.iter().position(|n| *n == wanted) {
        Some(j) => j,
        None => wanted
            .parse::<usize>()
            .ok()
            .filter(|j| *j < names.len())
            .ok_or_else(|| AppError::Data(format!("no coefficient named `{wanted}` (have {})", names.join(", "))))?,
    };
    if j == 0 {
        return Err(AppError::Data("the intercept cannot be tested".into()));
    }
    Ok((j, names[j].clone()))
}

fn fit(cfg: &RunConfig) -> Result<Outcome, AppError> {
    let path = cfg.data.as_ref().expect("validated");
    let csv = CsvOptions {
        family: Some(cfg.family),
        occasions: cfg.occasions,
        always_observed: cfg.always_observed.clone(),
        covariates: cfg.covariates.clone(),
    };
    let data = ingest_csv(path, &csv).map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
    let test = match cfg.command {
        Command::Test => Some(coefficient_index(cfg, &data)?),
        _ => None,
    };

    let opts = FitOptions::default();
    let mut est = Estimator::new(&data.dataset, cfg.family, opts)?;
    let fit = est.fit()?.clone();
    let mut intervals = Vec::with_capacity(cfg.levels.len());
    for &l in &cfg.levels {
        intervals.push(est.confidence_interval(l)?);
    }
    let mut report = FitReport::new(if test.is_some() { "test" } else { "fit" }, &data, &fit, &intervals);

    let w = estimate_w(est.objective(), &fit).ok();
    report.diagnostics.variance = w.as_ref().map(|w| VarianceReport {
        condition_number: w.condition_number,
        near_singular: w.near_singular,
        w_inv_11: w.inverse_11(),
    });
    if cfg.wald {
        let w = w.as_ref().ok_or_else(|| AppError::Optimization("variance matrix unavailable for --wald".into()))?;
        report.wald = Some(wald_interval_lognu(&fit, w, cfg.levels[0])?);
    }
    if cfg.complete_case {
        let cc_data = data.dataset.complete_cases();
        let mut cc = Estimator::new(&cc_data, cfg.family, opts)?;
        let cc_fit = cc.fit()?.clone();
        let ci = cc.confidence_interval(cfg.levels[0]).ok();
        report.complete_case = Some(BaselineReport {
            method: "CC".into(),
            n: cc_fit.n,
            nu_hat: cc_fit.nu_hat,
            nu_hat_rounded: round_nu(cc_fit.nu_hat),
            beta_hat: cc_fit.beta_hat.clone(),
            loglik: cc_fit.loglik,
            ci: ci.as_ref().map(CiReport::from),
        });
    }
    if let Some((j, name)) = &test {
        let lrt = est.lrt_coefficient(*j)?;
        report.test = Some(TestReport::new(name, &lrt));
    }

    let text = report.table();
    let stdout = emit(cfg, to_json(&report)?, text)?;
    let code = if !fit.converged() {
        eprintln!("error: the optimizer did not converge (gradient norm {:.2e})", fit.diagnostics.grad_norm);
        3
    } else if fit.diagnostics.at_cap {
        eprintln!("error: the estimate reached the abundance cap {:.0}; the data carry no recapture signal", fit.diagnostics.nu_cap);
        3
    } else {
        0
    };
    Ok(Outcome { stdout, code })
}

fn write_qq(cfg: &RunConfig, sample: &[f64]) -> Result<Option<f64>, AppError> {
    let Some(p) = &cfg.qq_out else { return Ok(None) };
    let points = qq_export(sample)?;
    let file = fs::File::create(p).map_err(io_err(p))?;
    write_qq_csv(file, &points)?;
    Ok(Some(ks_chi2_1(sample)))
}

fn scenario_config(cfg: &RunConfig) -> ScenarioConfig {
    let mut sc = ScenarioConfig::scenario(cfg.scenario.expect("validated"), cfg.nu0)
        .with_reps(cfg.reps)
        .with_seed(cfg.seed)
        .with_levels(cfg.levels.clone());
    sc.complete_case = cfg.complete_case;
    sc.variance = cfg.wald;
    sc
}

fn simulate(cfg: &RunConfig) -> Result<Outcome, AppError> {
    let sc = scenario_config(cfg);
    let metrics = run_study(&sc)?;
    if metrics.replications == 0 {
        return Err(AppError::Optimization(format!("all {} replications failed", metrics.failures)));
    }
    write_qq(cfg, &metrics.r_prime_nu0)?;
    let report = SimulationReport::new(metrics);
    let text = report.summary();
    let stdout = emit(cfg, to_json(&report)?, text)?;
    Ok(Outcome { stdout, code: 0 })
}

fn qq(cfg: &RunConfig) -> Result<Outcome, AppError> {
    let sample: Vec<f64> = match &cfg.data {
        Some(p) => {
            let raw = fs::read_to_string(p).map_err(io_err(p))?;
            let v: serde_json::Value =
                serde_json::from_str(&raw).map_err(|e| AppError::Data(format!("{}: {e}", p.display())))?;
            v.get("r_prime_nu0")
                .and_then(|s| s.as_array())
                .ok_or_else(|| AppError::Data(format!("{}: no r_prime_nu0 sample in report", p.display())))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| AppError::Data("non-numeric R' value".into())))
                .collect::<Result<_, _>>()?
        }
        None => {
            let mut sc = scenario_config(cfg).with_levels(Vec::new());
            sc.complete_case = false;
            sc.variance = false;
            run_study(&sc)?.r_prime_nu0
        }
    };
    let points = qq_export(&sample)?;
    let mut csv = Vec::new();
    write_qq_csv(&mut csv, &points)?;
    let ks = ks_chi2_1(&sample);
    let summary = format!("{} points, KS distance from chi2(1): {ks:.4}\n", sample.len());
    let target = cfg.qq_out.as_ref().or(cfg.out.as_ref());
    let stdout = match target {
        Some(p) => {
            fs::write(p, &csv).map_err(io_err(p))?;
            if cfg.quiet { String::new() } else { summary }
        }
        None => {
            if !cfg.quiet {
                eprint!("{summary}");
            }
            String::from_utf8(csv).expect("csv is utf-8")
        }
    };
    Ok(Outcome { stdout, code: 0 })
}
