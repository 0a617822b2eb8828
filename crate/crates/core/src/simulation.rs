//! Monte Carlo harness: the four simulation scenarios, replicated fits and
//! the aggregated bias, RMSE and coverage figures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::asymptotics;
use crate::error::{Error, Result};
use crate::estimator::{Estimator, FitOptions};
use crate::model::{CaptureDataset, Family, Record};
use crate::special::{chi2_1_cdf, chi2_1_quantile, logistic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    A,
    B,
    C,
    D,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Scenario::A),
            "B" => Ok(Scenario::B),
            "C" => Ok(Scenario::C),
            "D" => Ok(Scenario::D),
            other => Err(Error::InvalidData(format!("unknown scenario '{other}'"))),
        }
    }
}

/// `pr(R = 1 | D = k, X = x) = 1 / (1 + exp(intercept - x_coef x - k_coef k))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub intercept: f64,
    pub k_coef: f64,
    pub x_coef: f64,
}

impl Selection {
    pub fn prob(&self, k: usize, x: u8) -> f64 {
        logistic(-(self.intercept - self.x_coef * x as f64 - self.k_coef * k as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub label: String,
    pub nu0: usize,
    pub occasions: usize,
    /// Coefficients on `(1, Y)`, or `(1, X, Y)` when a binary covariate is drawn.
    pub beta: Vec<f64>,
    /// `P(X = 1)` of an always-observed binary covariate, if any.
    pub binary_prob: Option<f64>,
    /// `Y ~ Uniform(lo, hi)`.
    pub y_range: (f64, f64),
    pub selection: Selection,
    pub family: Family,
    pub reps: usize,
    pub seed: u64,
    pub levels: Vec<f64>,
    /// Also fit the complete-case estimator.
    pub complete_case: bool,
    /// Also compute the plug-in asymptotic variance of each fit.
    pub variance: bool,
}

impl ScenarioConfig {
    pub fn scenario(s: Scenario, nu0: usize) -> Self {
        let (occasions, extended) = match s {
            Scenario::A => (2, false),
            Scenario::B => (5, false),
            Scenario::C => (2, true),
            Scenario::D => (5, true),
        };
        ScenarioConfig {
            label: format!("{s:?}"),
            nu0,
            occasions,
            beta: if extended { vec![-2.0, 1.0, 1.0] } else { vec![-2.0, 1.0] },
            binary_prob: extended.then_some(0.3),
            y_range: (0.0, 3.0),
            selection: Selection { intercept: 0.5, k_coef: 0.7, x_coef: if extended { 0.7 } else { 0.0 } },
            family: if extended { Family::Extended } else { Family::Base },
            reps: 1000,
            seed: 1,
            levels: vec![0.9, 0.95, 0.99],
            complete_case: false,
            variance: false,
        }
    }

    pub fn with_reps(mut self, reps: usize) -> Self {
        self.reps = reps;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_levels(mut self, levels: Vec<f64>) -> Self {
        self.levels = levels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dim = if self.binary_prob.is_some() { 3 } else { 2 };
        if self.nu0 < 1 || self.reps < 1 || self.occasions < 1 {
            return Err(Error::InvalidData("nu0, reps and occasions must be at least 1".into()));
        }
        if self.beta.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: self.beta.len() });
        }
        if self.family == Family::Extended && self.binary_prob.is_none() {
            return Err(Error::MissingAlwaysObserved);
        }
        if !(self.y_range.0 < self.y_range.1) {
            return Err(Error::InvalidData("empty covariate range".into()));
        }
        if let Some(l) = self.levels.iter().find(|l| !(**l > 0.5 && **l < 1.0)) {
            return Err(Error::InvalidData(format!("confidence level {l} outside (0.5, 1)")));
        }
        Ok(())
    }
}

/// Draws one population and keeps the captured individuals. The stream is a
/// function of `(seed, stream)` only.
pub fn generate_stream(config: &ScenarioConfig, seed: u64, stream: u64) -> CaptureDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut records = Vec::new();
    let (lo, hi) = config.y_range;
    for _ in 0..config.nu0 {
        let x = config.binary_prob.map(|p| u8::from(rng.random::<f64>() < p));
        let y = lo + (hi - lo) * rng.random::<f64>();
        let z: Vec<f64> = match x {
            Some(x) => vec![1.0, x as f64, y],
            None => vec![1.0, y],
        };
        let g = logistic(z.iter().zip(&config.beta).map(|(a, b)| a * b).sum());
        let d = Binomial::new(config.occasions as u64, g).expect("probability in [0, 1]").sample(&mut rng) as usize;
        let u: f64 = rng.random();
        if d == 0 {
            continue;
        }
        let observed = u < config.selection.prob(d, x.unwrap_or(0));
        let mut r = if observed { Record::complete(d, z) } else { Record::missing(d) };
        if let Some(x) = x {
            r = r.with_always_observed(x);
        }
        records.push(r);
    }
    CaptureDataset::new(config.occasions, records).expect("generated data are valid")
}

pub fn generate(config: &ScenarioConfig, seed: u64) -> CaptureDataset {
    generate_stream(config, seed, 0)
}

/// One replication's raw outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Replication {
    pub index: usize,
    pub n: usize,
    pub m: usize,
    pub nu_hat: f64,
    pub at_cap: bool,
    pub r_prime_nu0: f64,
    pub intervals: Vec<LevelOutcome>,
    pub cc_nu_hat: Option<f64>,
    /// Plug-in `[W^-1]_{11}`.
    pub w_inv_11: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelOutcome {
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
    /// One-sided limits at the same level.
    pub lower_one_sided: f64,
    pub upper_one_sided: f64,
    pub upper_capped: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorMetrics {
    pub count: usize,
    pub mean: f64,
    pub bias: f64,
    /// `E(nu_hat - nu0)^2 / nu0`.
    pub rmse: f64,
    /// Monte Carlo standard error of the bias.
    pub bias_se: f64,
    pub at_cap: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Coverage {
    pub rate: f64,
    pub se: f64,
}

impl Coverage {
    fn of(hits: usize, total: usize) -> Coverage {
        let c = if total == 0 { f64::NAN } else { hits as f64 / total as f64 };
        Coverage { rate: c, se: (c * (1.0 - c) / total as f64).sqrt() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub level: f64,
    pub two_sided: Coverage,
    pub lower_limit: Coverage,
    pub upper_limit: Coverage,
    pub mean_lower: f64,
    pub mean_upper: f64,
    pub upper_capped: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceCheck {
    /// Sample variance of `sqrt(nu0) log(nu_hat / nu0)`.
    pub empirical: f64,
    /// Mean plug-in `[W^-1]_{11}`.
    pub mean_w_inv_11: f64,
    pub ratio: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ScenarioConfig,
    pub replications: usize,
    pub failures: usize,
    pub failure_messages: Vec<String>,
    pub proposed: EstimatorMetrics,
    pub complete_case: Option<EstimatorMetrics>,
    pub levels: Vec<LevelMetrics>,
    /// `R'(nu0)` of every successful replication, in replication order.
    pub r_prime_nu0: Vec<f64>,
    pub variance: Option<VarianceCheck>,
    pub mean_n: f64,
    pub mean_m: f64,
}

pub fn replicate(config: &ScenarioConfig, index: usize, opts: &FitOptions) -> Result<Replication> {
    let data = generate_stream(config, config.seed, index as u64);
    let nu0 = config.nu0 as f64;
    let mut est = Estimator::new(&data, config.family, *opts)?;
    let fit = est.fit()?.clone();
    if !fit.converged() {
        return Err(Error::Optimization(format!("replication {index}: middle layer did not converge")));
    }
    let r_prime_nu0 = est.ratio_profile(nu0)?;
    let mut intervals = Vec::with_capacity(config.levels.len());
    for &level in &config.levels {
        let two = est.confidence_interval(level)?;
        let one = est.one_sided_limits(level)?;
        intervals.push(LevelOutcome {
            level,
            lower: two.lower,
            upper: two.upper,
            lower_one_sided: one.lower,
            upper_one_sided: one.upper,
            upper_capped: two.upper_capped,
        });
    }
    let cc_nu_hat = if config.complete_case {
        let cc = data.complete_cases();
        let mut e = Estimator::new(&cc, config.family, *opts)?;
        Some(e.fit()?.nu_hat)
    } else {
        None
    };
    let w_inv_11 = if config.variance {
        asymptotics::estimate_w(est.objective(), &fit).ok().and_then(|w| w.inverse_11())
    } else {
        None
    };
    Ok(Replication {
        index,
        n: data.n(),
        m: data.m(),
        nu_hat: fit.nu_hat,
        at_cap: fit.diagnostics.at_cap,
        r_prime_nu0,
        intervals,
        cc_nu_hat,
        w_inv_11,
    })
}

fn run_all(config: &ScenarioConfig, opts: &FitOptions) -> Vec<Result<Replication>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..config.reps).into_par_iter().map(|i| replicate(config, i, opts)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..config.reps).map(|i| replicate(config, i, opts)).collect()
    }
}

/// Runs every replication (in parallel with the `parallel` feature) and
/// aggregates. Replications that fail are counted and left out.
pub fn run_study(config: &ScenarioConfig) -> Result<MetricsReport> {
    run_study_with(config, &FitOptions::default())
}

pub fn run_study_with(config: &ScenarioConfig, opts: &FitOptions) -> Result<MetricsReport> {
    config.validate()?;
    let results = run_all(config, opts);
    let mut reps = Vec::new();
    let mut failure_messages = Vec::new();
    for r in results {
        match r {
            Ok(r) => reps.push(r),
            Err(e) => failure_messages.push(e.to_string()),
        }
    }
    Ok(aggregate(config, &reps, failure_messages))
}

fn estimator_metrics(values: &[(f64, bool)], nu0: f64) -> EstimatorMetrics {
    let count = values.len();
    let nf = count as f64;
    let mean = values.iter().map(|v| v.0).sum::<f64>() / nf;
    let mse = values.iter().map(|v| (v.0 - nu0).powi(2)).sum::<f64>() / nf;
    let var = if count > 1 {
        values.iter().map(|v| (v.0 - mean).powi(2)).sum::<f64>() / (nf - 1.0)
    } else {
        0.0
    };
    EstimatorMetrics {
        count,
        mean,
        bias: mean - nu0,
        rmse: mse / nu0,
        bias_se: (var / nf).sqrt(),
        at_cap: values.iter().filter(|v| v.1).count(),
    }
}

pub fn aggregate(config: &ScenarioConfig, reps: &[Replication], failure_messages: Vec<String>) -> MetricsReport {
    let nu0 = config.nu0 as f64;
    let total = reps.len();
    let proposed = estimator_metrics(&reps.iter().map(|r| (r.nu_hat, r.at_cap)).collect::<Vec<_>>(), nu0);
    let complete_case = config.complete_case.then(|| {
        let v: Vec<(f64, bool)> = reps.iter().filter_map(|r| r.cc_nu_hat.map(|x| (x, false))).collect();
        estimator_metrics(&v, nu0)
    });
    let levels = config
        .levels
        .iter()
        .enumerate()
        .map(|(j, &level)| {
            let outs: Vec<&LevelOutcome> = reps.iter().map(|r| &r.intervals[j]).collect();
            let two = outs.iter().filter(|o| o.lower <= nu0 && nu0 <= o.upper).count();
            let low = outs.iter().filter(|o| o.lower_one_sided <= nu0).count();
            let up = outs.iter().filter(|o| nu0 <= o.upper_one_sided).count();
            LevelMetrics {
                level,
                two_sided: Coverage::of(two, total),
                lower_limit: Coverage::of(low, total),
                upper_limit: Coverage::of(up, total),
                mean_lower: outs.iter().map(|o| o.lower).sum::<f64>() / total as f64,
                mean_upper: outs.iter().map(|o| o.upper).sum::<f64>() / total as f64,
                upper_capped: outs.iter().filter(|o| o.upper_capped).count(),
            }
        })
        .collect();
    let variance = config.variance.then(|| {
        let s: Vec<f64> = reps.iter().map(|r| nu0.sqrt() * (r.nu_hat / nu0).ln()).collect();
        let w: Vec<f64> = reps.iter().filter_map(|r| r.w_inv_11).collect();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let empirical = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s.len() as f64 - 1.0);
        let mean_w = w.iter().sum::<f64>() / w.len() as f64;
        VarianceCheck { empirical, mean_w_inv_11: mean_w, ratio: empirical / mean_w, count: w.len() }
    });
    MetricsReport {
        config: config.clone(),
        replications: config.reps,
        failures: failure_messages.len(),
        failure_messages,
        proposed,
        complete_case,
        levels,
        r_prime_nu0: reps.iter().map(|r| r.r_prime_nu0).collect(),
        variance,
        mean_n: reps.iter().map(|r| r.n as f64).sum::<f64>() / total as f64,
        mean_m: reps.iter().map(|r| r.m as f64).sum::<f64>() / total as f64,
    }
}

/// Sorted sample paired with chi-square(1) quantiles at `(i - 0.5) / N`.
pub fn qq_export(sample: &[f64]) -> Result<Vec<(f64, f64)>> {
    if sample.is_empty() {
        return Err(Error::InvalidData("empty sample for QQ export".into()));
    }
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let nf = s.len() as f64;
    Ok(s.into_iter().enumerate().map(|(i, v)| (v, chi2_1_quantile((i as f64 + 0.5) / nf))).collect())
}

/// Kolmogorov-Smirnov distance between a sample and chi-square(1).
pub fn ks_chi2_1(sample: &[f64]) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let nf = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = chi2_1_cdf(v);
            (f - i as f64 / nf).abs().max(((i + 1) as f64 / nf - f).abs())
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_a_fractions() {
        let cfg = ScenarioConfig::scenario(Scenario::A, 200_000);
        let d = generate(&cfg, 3);
        let captured = d.n() as f64 / 200_000.0;
        let missing = 1.0 - d.m() as f64 / d.n() as f64;
        assert!((captured - 0.60).abs() < 0.02, "captured {captured}");
        assert!((missing - 0.40).abs() < 0.02, "missing {missing}");
    }

    #[test]
    fn scenario_fractions_b_c_d() {
        for (s, cap, miss) in [(Scenario::B, 0.84, 0.27), (Scenario::C, 0.66, 0.34), (Scenario::D, 0.88, 0.22)] {
            let d = generate(&ScenarioConfig::scenario(s, 100_000), 5);
            let captured = d.n() as f64 / 100_000.0;
            let missing = 1.0 - d.m() as f64 / d.n() as f64;
            assert!((captured - cap).abs() < 0.02, "{s:?} captured {captured}");
            assert!((missing - miss).abs() < 0.02, "{s:?} missing {missing}");
        }
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let cfg = ScenarioConfig::scenario(Scenario::C, 300);
        assert_eq!(generate_stream(&cfg, 9, 4), generate_stream(&cfg, 9, 4));
        assert_ne!(generate_stream(&cfg, 9, 4), generate_stream(&cfg, 9, 5));
        let d = generate(&cfg, 9);
        assert!(d.records().iter().all(|r| r.always_observed.is_some()));
    }

    #[test]
    fn very_negative_intercept_gives_near_empty_data() {
        let mut cfg = ScenarioConfig::scenario(Scenario::A, 500);
        cfg.beta = vec![-60.0, 1.0];
        assert_eq!(generate(&cfg, 1).n(), 0);
    }

    #[test]
    fn qq_and_ks() {
        assert!(qq_export(&[]).is_err());
        let one = qq_export(&[1.3]).unwrap();
        assert_eq!(one.len(), 1);
        assert!((one[0].1 - chi2_1_quantile(0.5)).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let normal = rand_distr::StandardNormal;
        let sample: Vec<f64> = (0..4000)
            .map(|_| {
                let z: f64 = normal.sample(&mut rng);
                z * z
            })
            .collect();
        assert!(ks_chi2_1(&sample) < 0.03);
        let qq = qq_export(&sample).unwrap();
        assert!(qq.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
        let shifted: Vec<f64> = sample.iter().map(|v| v + 0.5).collect();
        assert!(ks_chi2_1(&shifted) > 0.1);
    }

    #[test]
    fn single_replication_report_matches_replication() {
        let cfg = ScenarioConfig::scenario(Scenario::B, 60).with_reps(1).with_levels(vec![0.95]);
        let rep = replicate(&cfg, 0, &FitOptions::default()).unwrap();
        let report = run_study(&cfg).unwrap();
        assert_eq!(report.failures, 0);
        assert_eq!(report.proposed.mean, rep.nu_hat);
        let hit = rep.intervals[0].lower <= 60.0 && 60.0 <= rep.intervals[0].upper;
        assert_eq!(report.levels[0].two_sided.rate, if hit { 1.0 } else { 0.0 });
        assert!(report.proposed.rmse >= report.proposed.bias.powi(2) / 60.0 - 1e-12);
    }
}
