//! WebAssembly bindings for the demo page in `www/`. Every export returns a
//! JSON string.

use capture_el::estimator::{Estimator, FitOptions};
use capture_el::io::{label_generated, read_csv, write_csv, CsvOptions};
use capture_el::model::Family;
use capture_el::simulation::{generate, ks_chi2_1, qq_export, run_study, Scenario, ScenarioConfig};
use capture_el::{Error, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct Curve {
    pub n: usize,
    pub m: usize,
    pub nu_hat: f64,
    pub beta_hat: Vec<f64>,
    pub beta_names: Vec<String>,
    pub level: f64,
    pub threshold: f64,
    pub lower: f64,
    pub upper: f64,
    pub upper_capped: bool,
    /// `(nu, R'(nu))` on a grid from `n` past the upper limit.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Serialize)]
pub struct Qq {
    pub replications: usize,
    pub failures: usize,
    pub ks: f64,
    /// `(empirical, chi2_1)` pairs.
    pub points: Vec<(f64, f64)>,
}

pub fn profile_curve_impl(
    csv: &str,
    occasions: Option<usize>,
    extended: bool,
    always_observed: Option<String>,
    level: f64,
    grid: usize,
) -> Result<Curve> {
    let opts = CsvOptions {
        family: Some(if extended { Family::Extended } else { Family::Base }),
        occasions,
        always_observed,
        covariates: None,
    };
    let data = read_csv(csv.as_bytes(), &opts)?;
    let mut est = Estimator::new(&data.dataset, data.family, FitOptions::default())?;
    let fit = est.fit()?.clone();
    let ci = est.confidence_interval(level)?;
    let n = fit.n as f64;
    let top = if ci.upper_capped { 3.0 * fit.nu_hat } else { ci.upper };
    let hi = n + 1.25 * (top - n).max(1.0);
    let grid = grid.clamp(10, 400);
    let mut points = Vec::with_capacity(grid + 1);
    for i in 0..=grid {
        let nu = n + (hi - n) * i as f64 / grid as f64;
        if let Ok(r) = est.ratio_profile(nu) {
            points.push((nu, r));
        }
    }
    Ok(Curve {
        n: fit.n,
        m: fit.m,
        nu_hat: fit.nu_hat,
        beta_hat: fit.beta_hat,
        beta_names: data.beta_names,
        level,
        threshold: ci.threshold,
        lower: ci.lower,
        upper: ci.upper,
        upper_capped: ci.upper_capped,
        points,
    })
}

pub fn qq_study_impl(scenario: &str, nu0: usize, reps: usize, seed: u64) -> Result<Qq> {
    let s: Scenario = scenario.parse()?;
    let cfg = ScenarioConfig::scenario(s, nu0).with_reps(reps).with_seed(seed).with_levels(Vec::new());
    let report = run_study(&cfg)?;
    if report.r_prime_nu0.is_empty() {
        return Err(Error::Optimization("every replication failed".into()));
    }
    Ok(Qq {
        replications: report.replications,
        failures: report.failures,
        ks: ks_chi2_1(&report.r_prime_nu0),
        points: qq_export(&report.r_prime_nu0)?,
    })
}

pub fn sample_csv_impl(scenario: &str, nu0: usize, seed: u64) -> Result<String> {
    let s: Scenario = scenario.parse()?;
    let data = generate(&ScenarioConfig::scenario(s, nu0), seed);
    let mut out = Vec::new();
    write_csv(&mut out, &label_generated(data))?;
    String::from_utf8(out).map_err(|e| Error::InvalidData(e.to_string()))
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

/// Fits the CSV text and traces `R'(nu)`. `occasions` of 0 means "infer
/// from occasion columns"; an empty `always_observed` means none.
#[wasm_bindgen]
pub fn profile_curve(
    csv: &str,
    occasions: u32,
    extended: bool,
    always_observed: &str,
    level: f64,
    grid: u32,
) -> std::result::Result<String, JsError> {
    let k = (occasions > 0).then_some(occasions as usize);
    let ao = (!always_observed.trim().is_empty()).then(|| always_observed.trim().to_string());
    to_js(profile_curve_impl(csv, k, extended, ao, level, grid as usize))
}

/// Small Monte Carlo study of `R'(nu0)` against chi-square(1).
#[wasm_bindgen]
pub fn qq_study(scenario: &str, nu0: u32, reps: u32, seed: u32) -> std::result::Result<String, JsError> {
    to_js(qq_study_impl(scenario, nu0 as usize, reps as usize, seed as u64))
}

/// One simulated dataset as CSV text, to fill the input box.
#[wasm_bindgen]
pub fn sample_csv(scenario: &str, nu0: u32, seed: u32) -> std::result::Result<String, JsError> {
    sample_csv_impl(scenario, nu0 as usize, seed as u64).map_err(|e| JsError::new(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_dips_to_zero_at_the_estimate() {
        let csv = sample_csv_impl("B", 200, 4).unwrap();
        let c = profile_curve_impl(&csv, Some(5), false, None, 0.95, 40).unwrap();
        assert_eq!(c.points.len(), 41);
        assert_eq!(c.points[0].0, c.n as f64);
        assert!(c.lower <= c.nu_hat && c.nu_hat <= c.upper);
        let min = c.points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        assert!(min < c.threshold);
        assert!(c.points.last().unwrap().1 > c.threshold);
    }

    #[test]
    fn qq_points_are_sorted() {
        let q = qq_study_impl("A", 200, 5, 1).unwrap();
        assert_eq!(q.points.len(), q.replications);
        assert!(q.points.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
        assert!((0.0..=1.0).contains(&q.ks));
    }

    #[test]
    fn bad_input_is_an_error() {
        assert!(profile_curve_impl("d,y\n1,0.5\n0,1\n", Some(2), false, None, 0.95, 20).is_err());
        assert!(qq_study_impl("Z", 200, 5, 1).is_err());
    }
}
