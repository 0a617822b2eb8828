//! Maximum empirical likelihood estimation of the abundance and the
//! likelihood-ratio quantities built on it.

mod interval;
pub(crate) mod middle;

use serde::Serialize;

use crate::el::{ElObjective, LambdaOptions};
use crate::error::{Error, Result};
use crate::model::{CaptureDataset, Family};
use crate::optim::{brent_root, maximize_scalar, BfgsOptions, Status};
use crate::special::{chi2_1_sf, logistic};

pub use interval::IntervalResult;
use middle::{MiddleSolution, Transform};

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub lambda: LambdaOptions,
    pub bfgs: BfgsOptions,
    /// The abundance search stops at `cap_factor * n`.
    pub cap_factor: f64,
    /// Jittered restarts tried when a middle-layer solve fails.
    pub restarts: usize,
    /// Tolerance of the outer search on `log(nu - n + 1)`.
    pub outer_tol: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            lambda: LambdaOptions::default(),
            bfgs: BfgsOptions::default(),
            cap_factor: 1e4,
            restarts: 5,
            outer_tol: 1e-7,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitDiagnostics {
    /// Status of the `(alpha, beta)` maximization at the reported abundance.
    pub status: Status,
    pub grad_norm: f64,
    pub middle_iterations: usize,
    pub outer_evaluations: usize,
    pub middle_solves: usize,
    /// Middle solves that needed a cold start or restarts.
    pub fallbacks: usize,
    pub lambda_residual: f64,
    /// `nu_hat == n`: every individual was presumably seen.
    pub at_lower_bound: bool,
    /// The search reached the cap and the estimate is not finite in practice.
    pub at_cap: bool,
    pub nu_cap: f64,
    /// Derivative of the profile log-likelihood in `nu` at the estimate.
    pub score_nu: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub family: Family,
    pub cells: Vec<String>,
    pub active: Vec<bool>,
    pub n: usize,
    pub m: usize,
    pub nu_hat: f64,
    /// Estimated cell probabilities. Entries of inactive cells hold the value
    /// implied by the fitted weights.
    pub alpha_hat: Vec<f64>,
    pub beta_hat: Vec<f64>,
    pub loglik: f64,
    pub lambda: Vec<f64>,
    /// Cells used as multiplier columns.
    pub lambda_columns: Vec<usize>,
    pub weights: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    pub fn converged(&self) -> bool {
        self.diagnostics.status == Status::Converged || self.diagnostics.grad_norm <= middle::STALL_ACCEPT
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LrtResult {
    pub coefficient: usize,
    pub statistic: f64,
    /// Statistic before clamping at zero; slightly negative values reflect
    /// optimization noise.
    pub raw_statistic: f64,
    pub p_value: f64,
    pub loglik_full: f64,
    pub loglik_null: f64,
    pub nu_hat_null: f64,
    pub beta_hat_null: Vec<f64>,
}

/// Profile of `max_{alpha, beta} l(nu, alpha, beta)` over `nu`, with a cache
/// of solved points used as warm starts.
#[derive(Debug, Clone)]
struct Profiler {
    tr: Transform,
    beta0: Vec<f64>,
    cache: Vec<MiddleSolution>,
    solves: usize,
    fallbacks: usize,
}

const CACHE_LIMIT: usize = 400;

impl Profiler {
    fn new(obj: &ElObjective, fixed: &[(usize, f64)]) -> Self {
        Profiler {
            tr: Transform::new(obj, fixed),
            beta0: middle::binomial_glm(obj, fixed),
            cache: Vec::new(),
            solves: 0,
            fallbacks: 0,
        }
    }

    fn nearest(&self, nu: f64) -> Option<&MiddleSolution> {
        self.cache
            .iter()
            .filter(|s| s.acceptable())
            .min_by(|a, b| (a.nu.ln() - nu.ln()).abs().total_cmp(&(b.nu.ln() - nu.ln()).abs()))
    }

    fn at(&mut self, obj: &ElObjective, opts: &FitOptions, nu: f64) -> MiddleSolution {
        if let Some(s) = self.cache.iter().find(|s| s.nu == nu) {
            return s.clone();
        }
        self.solves += 1;
        let near = self.nearest(nu).cloned();
        let mut best: Option<MiddleSolution> = None;
        let consider = |s: MiddleSolution, best: &mut Option<MiddleSolution>| {
            let better = match best {
                None => true,
                Some(b) => {
                    (s.acceptable() && !b.acceptable()) || (s.acceptable() == b.acceptable() && s.loglik > b.loglik)
                }
            };
            if better {
                *best = Some(s);
            }
        };
        if let Some(near) = &near {
            consider(middle::solve(obj, &self.tr, nu, &near.x, Some(&near.hinv), opts.bfgs), &mut best);
        }
        if !best.as_ref().is_some_and(MiddleSolution::acceptable) {
            if near.is_some() {
                self.fallbacks += 1;
            }
            let beta = near.as_ref().map_or(self.beta0.clone(), |s| s.beta.clone());
            let x0 = middle::cold_start(obj, &self.tr, nu, &beta);
            let seed = middle::curvature_seed(obj, &self.tr, nu, &x0);
            consider(middle::solve(obj, &self.tr, nu, &x0, seed.as_deref(), opts.bfgs), &mut best);
        }
        // a stall usually means a stale inverse Hessian; restart in place
        for _ in 0..3 {
            match &best {
                Some(b) if !b.acceptable() && b.loglik.is_finite() => {
                    let again = middle::solve(obj, &self.tr, nu, &b.x, None, opts.bfgs);
                    let gained = again.loglik > b.loglik;
                    consider(again, &mut best);
                    if !gained {
                        break;
                    }
                }
                _ => break,
            }
        }
        if !best.as_ref().is_some_and(MiddleSolution::acceptable) {
            self.fallbacks += 1;
            for beta in middle::jitter(&self.beta0, opts.seed ^ nu.to_bits(), opts.restarts) {
                let x0 = middle::cold_start(obj, &self.tr, nu, &beta);
                consider(middle::solve(obj, &self.tr, nu, &x0, None, opts.bfgs), &mut best);
                if best.as_ref().is_some_and(MiddleSolution::acceptable) {
                    break;
                }
            }
        }
        let s = best.expect("at least one middle solve");
        if self.cache.len() >= CACHE_LIMIT {
            self.cache.remove(0);
        }
        self.cache.push(s.clone());
        s
    }

    fn value(&mut self, obj: &ElObjective, opts: &FitOptions, nu: f64) -> f64 {
        self.at(obj, opts, nu).loglik
    }

    fn score(&mut self, obj: &ElObjective, opts: &FitOptions, nu: f64) -> f64 {
        let s = self.at(obj, opts, nu);
        obj.dloglik_dnu(nu, s.gamma0())
    }

    /// Start for the outer search: a Horvitz-Thompson type estimate from the
    /// starting coefficients, scaled up for the missing covariates.
    fn initial_nu(&self, obj: &ElObjective) -> f64 {
        let kk = obj.occasions() as i32;
        let s: f64 = (0..obj.m())
            .map(|i| {
                let eta: f64 = obj.covariates(i).iter().zip(&self.beta0).map(|(a, b)| a * b).sum();
                1.0 / (1.0 - logistic(-eta).powi(kk)).max(1e-6)
            })
            .sum();
        s * obj.n() as f64 / obj.m() as f64
    }

    /// Maximizes the profile over `nu` in `[n, cap]`.
    fn maximize(&mut self, obj: &ElObjective, opts: &FitOptions) -> Outer {
        let n = obj.n() as f64;
        let cap = (opts.cap_factor * n).max(n + 10.0);
        let nu_of = |t: f64| if t <= 0.0 { n } else { n - 1.0 + t.exp() };
        let t_cap = (cap - n + 1.0).ln();
        let t0 = (self.initial_nu(obj).clamp(n, cap) - n + 1.0).ln().clamp(0.0, t_cap);
        let smax = maximize_scalar(|t| self.value(obj, opts, nu_of(t)), 0.0, t_cap, t0, 0.5, opts.outer_tol);
        let mut nu = nu_of(smax.x);
        let mut evals = smax.evaluations;
        if smax.at_lower {
            // the maximum is at n when the profile decreases from there
            if self.score(obj, opts, n) <= 0.0 {
                nu = n;
            }
        } else if !smax.at_upper {
            // value-based search cannot resolve the flat top finely; polish
            // on the derivative, which is available in closed form
            let mut delta = 1e-4;
            for _ in 0..4 {
                let (a, b) = (nu_of((smax.x - delta).max(0.0)), nu_of((smax.x + delta).min(t_cap)));
                let (fa, fb) = (self.score(obj, opts, a), self.score(obj, opts, b));
                evals += 2;
                if fa > 0.0 && fb < 0.0 {
                    let r = brent_root(|v| self.score(obj, opts, v), a, b, fa, fb, 1e-15, 1e-12);
                    evals += r.evaluations;
                    if self.value(obj, opts, r.x) >= smax.f - 1e-9 {
                        nu = r.x;
                    }
                    break;
                }
                delta *= 10.0;
            }
        }
        Outer { nu, evaluations: evals, at_lower: nu <= n, at_cap: smax.at_upper, cap }
    }
}

struct Outer {
    nu: f64,
    evaluations: usize,
    at_lower: bool,
    at_cap: bool,
    cap: f64,
}

/// Estimator bound to one dataset and family. Keeps the solved profile so
/// that ratio statistics and intervals reuse earlier work.
#[derive(Debug, Clone)]
pub struct Estimator {
    /// Constraints only on cell 0 and the cells holding incomplete individuals.
    obj: ElObjective,
    opts: FitOptions,
    profiler: Profiler,
    fit: Option<FitResult>,
}

impl Estimator {
    pub fn new(data: &CaptureDataset, family: Family, opts: FitOptions) -> Result<Self> {
        if data.m() == 0 {
            return Err(Error::NoCompleteCases);
        }
        if data.m() < data.dim() {
            return Err(Error::TooFewCompleteCases { complete: data.m(), dim: data.dim() });
        }
        let obj = ElObjective::new(data, family)?.with_lambda_options(opts.lambda);
        let support = obj.support_mask();
        if let Some(c) = (0..support.0.len()).find(|&c| !support.is_active(c) && obj.counts().count(c) > 0) {
            return Err(Error::InvalidData(format!(
                "{} incomplete individuals in cell {} but no complete case at that always-observed level",
                obj.counts().count(c),
                obj.family().cells()[c].label()
            )));
        }
        let profiler = Profiler::new(&obj, &[]);
        Ok(Estimator { obj, opts, profiler, fit: None })
    }

    pub fn objective(&self) -> &ElObjective {
        &self.obj
    }

    pub fn options(&self) -> &FitOptions {
        &self.opts
    }

    pub fn fit(&mut self) -> Result<&FitResult> {
        if self.fit.is_none() {
            let outer = self.profiler.maximize(&self.obj, &self.opts);
            let sol = self.profiler.at(&self.obj, &self.opts, outer.nu);
            if !sol.loglik.is_finite() {
                return Err(Error::Optimization(format!(
                    "no feasible (alpha, beta) found at nu = {}",
                    outer.nu
                )));
            }
            let result = self.assemble(&sol, &outer);
            self.fit = Some(result);
        }
        Ok(self.fit.as_ref().expect("fit stored"))
    }

    fn assemble(&self, sol: &MiddleSolution, outer: &Outer) -> FitResult {
        let obj = &self.obj;
        let fam = obj.family();
        let (weights, lambda, columns) = match obj.weights(&sol.alpha, &sol.beta) {
            Some((w, l, c)) => (w.0, l, c),
            None => (Vec::new(), Default::default(), Vec::new()),
        };
        let mut alpha = sol.alpha.clone();
        if !weights.is_empty() {
            let mut row = vec![0.0; fam.n_cells()];
            let mut implied = vec![0.0; fam.n_cells()];
            for (i, w) in weights.iter().enumerate() {
                obj.cell_row(i, &sol.beta, &mut row);
                for c in 0..row.len() {
                    implied[c] += w * row[c];
                }
            }
            for c in 0..alpha.len() {
                if !obj.mask().is_active(c) {
                    alpha[c] = implied[c];
                }
            }
        }
        FitResult {
            family: fam.family(),
            cells: fam.cells().iter().map(|c| c.label()).collect(),
            active: self.obj.mask().0.clone(),
            n: obj.n(),
            m: obj.m(),
            nu_hat: outer.nu,
            alpha_hat: alpha,
            beta_hat: sol.beta.clone(),
            loglik: sol.loglik,
            lambda: lambda.lambda.clone(),
            lambda_columns: columns,
            weights,
            diagnostics: FitDiagnostics {
                status: sol.status,
                grad_norm: sol.grad_norm,
                middle_iterations: sol.iterations,
                outer_evaluations: outer.evaluations,
                middle_solves: self.profiler.solves,
                fallbacks: self.profiler.fallbacks,
                lambda_residual: lambda.residual,
                at_lower_bound: outer.at_lower,
                at_cap: outer.at_cap,
                nu_cap: outer.cap,
                score_nu: obj.dloglik_dnu(outer.nu, sol.gamma0()),
            },
        }
    }

    /// `max_{alpha, beta} l(nu, alpha, beta)`.
    pub fn profile(&mut self, nu: f64) -> Result<f64> {
        let n = self.obj.n() as f64;
        if !(nu >= n) || !nu.is_finite() {
            return Err(Error::Domain(format!("abundance {nu} is below n = {n}")));
        }
        Ok(self.profiler.value(&self.obj, &self.opts, nu))
    }

    /// Fitted `(alpha, beta)` of the profile at `nu`.
    pub fn profile_point(&mut self, nu: f64) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        self.profile(nu)?;
        let s = self.profiler.at(&self.obj, &self.opts, nu);
        Ok((s.alpha, s.beta, s.loglik))
    }

    /// Profile likelihood ratio `R'(nu) = 2 {l_hat - max l(nu, .)}`.
    pub fn ratio_profile(&mut self, nu: f64) -> Result<f64> {
        let top = self.fit()?.loglik;
        let v = self.profile(nu)?;
        Ok((2.0 * (top - v)).max(0.0))
    }

    /// Full likelihood ratio `R(nu, alpha, beta) = 2 {l_hat - l(nu, alpha, beta)}`.
    pub fn ratio_full(&mut self, nu: f64, alpha: &[f64], beta: &[f64]) -> Result<f64> {
        let top = self.fit()?.loglik;
        let v = self.obj.loglik(nu, alpha, beta)?;
        Ok(2.0 * (top - v))
    }

    /// Likelihood ratio test of `beta_j = 0`.
    pub fn lrt_coefficient(&mut self, j: usize) -> Result<LrtResult> {
        let p = self.obj.dim();
        if j >= p {
            return Err(Error::DimensionMismatch { expected: p, got: j + 1 });
        }
        let full = self.fit()?.loglik;
        let mut null = Profiler::new(&self.obj, &[(j, 0.0)]);
        let outer = null.maximize(&self.obj, &self.opts);
        let sol = null.at(&self.obj, &self.opts, outer.nu);
        if !sol.loglik.is_finite() {
            return Err(Error::Optimization(format!("constrained fit with beta[{j}] = 0 failed")));
        }
        let raw = 2.0 * (full - sol.loglik);
        let stat = raw.max(0.0);
        Ok(LrtResult {
            coefficient: j,
            statistic: stat,
            raw_statistic: raw,
            p_value: chi2_1_sf(stat),
            loglik_full: full,
            loglik_null: sol.loglik,
            nu_hat_null: outer.nu,
            beta_hat_null: sol.beta,
        })
    }
}

pub fn fit_mele(data: &CaptureDataset, family: Family, opts: &FitOptions) -> Result<FitResult> {
    let mut est = Estimator::new(data, family, *opts)?;
    est.fit().cloned()
}

/// Fit that discards every individual with missing covariates.
pub fn fit_complete_case(data: &CaptureDataset, family: Family, opts: &FitOptions) -> Result<FitResult> {
    fit_mele(&data.complete_cases(), family, opts)
}

pub fn ratio_profile(nu: f64, data: &CaptureDataset, family: Family) -> Result<f64> {
    Estimator::new(data, family, FitOptions::default())?.ratio_profile(nu)
}

pub fn ratio_full(nu: f64, alpha: &[f64], beta: &[f64], data: &CaptureDataset, family: Family) -> Result<f64> {
    Estimator::new(data, family, FitOptions::default())?.ratio_full(nu, alpha, beta)
}

pub fn confidence_interval(data: &CaptureDataset, family: Family, level: f64) -> Result<IntervalResult> {
    Estimator::new(data, family, FitOptions::default())?.confidence_interval(level)
}

pub fn lrt_coefficient(data: &CaptureDataset, family: Family, j: usize) -> Result<LrtResult> {
    Estimator::new(data, family, FitOptions::default())?.lrt_coefficient(j)
}
