//! Empirical-likelihood engine: the inner Lagrange-multiplier solve, the EL
//! weights, and the profile empirical log-likelihood in `(nu, alpha, beta)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{summarize, Cell, CaptureDataset, CellCounts, ConstraintMask, Family, ModelFamily};
use crate::special::{digamma, ln_choose, log_logistic, logistic};

/// Tolerance on `|sum(alpha) - 1|` below which a fully active constraint set
/// is treated as lying on the simplex, where one component is redundant.
pub const SIMPLEX_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaOptions {
    /// Bound on the infinity norm of `sum_i U_i / (1 + lambda'U_i)`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LambdaOptions {
    fn default() -> Self {
        LambdaOptions { tol: 1e-10, max_iter: 100 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LambdaSolution {
    pub lambda: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Infinity norm of the multiplier equation at exit.
    pub residual: f64,
}

/// Solves `sum_i U_i / (1 + lambda'U_i) = 0` for the rows of `u` (m x q).
///
/// This is the stationarity condition of the concave dual
/// `sum_i log(1 + lambda'U_i)`, which is maximized by damped Newton from
/// `lambda = 0`; steps are halved until they stay inside the feasible region
/// and do not decrease the dual. When the origin is not inside the convex
/// hull of the rows the dual is unbounded and the result has
/// `converged == false`.
pub fn solve_lambda(u: &DMatrix<f64>, opts: LambdaOptions) -> Result<LambdaSolution> {
    let (m, q) = u.shape();
    if m == 0 || q == 0 {
        return Err(Error::Domain(format!("empty constraint matrix ({m} x {q})")));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite constraint evaluation".into()));
    }
    let rows: Vec<f64> = (0..m).flat_map(|i| u.row(i).iter().copied().collect::<Vec<_>>()).collect();
    Ok(solve_lambda_rows(&rows, m, q, opts, None))
}

/// Row-major variant of [`solve_lambda`]. With `scale`, component `a` of the
/// equation must also be below `tol * scale[a]`, so that columns of tiny
/// magnitude are solved to their own precision.
pub(crate) fn solve_lambda_rows(
    u: &[f64],
    m: usize,
    q: usize,
    opts: LambdaOptions,
    scale: Option<&[f64]>,
) -> LambdaSolution {
    debug_assert_eq!(u.len(), m * q);
    let mut lambda = vec![0.0; q];
    let mut w = vec![1.0; m];
    let mut dual = 0.0f64;
    let mut grad = vec![0.0; q];
    let mut jac = DMatrix::<f64>::zeros(q, q);
    let mut trial_w = vec![0.0; m];

    for it in 0..=opts.max_iter {
        grad.iter_mut().for_each(|g| *g = 0.0);
        jac.fill(0.0);
        for i in 0..m {
            let row = &u[i * q..(i + 1) * q];
            let inv = 1.0 / w[i];
            let inv2 = inv * inv;
            for a in 0..q {
                grad[a] += row[a] * inv;
                let ra = row[a] * inv2;
                for b in 0..=a {
                    jac[(a, b)] += ra * row[b];
                }
            }
        }
        let residual = grad.iter().fold(0.0f64, |acc, g| acc.max(g.abs()));
        // sum_i 1/w_i = m - lambda'grad; along an escaping ray of an unbounded
        // dual the gradient vanishes while lambda'grad stays of order one, so
        // both must be small.
        let escaping: f64 = lambda.iter().zip(&grad).map(|(l, g)| l * g).sum();
        let scaled = scale.is_none_or(|sc| grad.iter().zip(sc).all(|(g, s)| g.abs() <= opts.tol * s));
        if residual <= opts.tol && scaled && escaping.abs() <= opts.tol {
            return LambdaSolution { lambda, converged: true, iterations: it, residual };
        }
        if it == opts.max_iter {
            return LambdaSolution { lambda, converged: false, iterations: it, residual };
        }
        for a in 0..q {
            for b in 0..a {
                jac[(b, a)] = jac[(a, b)];
            }
        }
        let Some(delta) = newton_direction(&jac, &grad) else {
            return LambdaSolution { lambda, converged: false, iterations: it, residual };
        };

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let mut feasible = true;
            let mut trial_dual = 0.0;
            for i in 0..m {
                let row = &u[i * q..(i + 1) * q];
                let mut v = 1.0;
                for a in 0..q {
                    v += (lambda[a] + step * delta[a]) * row[a];
                }
                if !(v > 0.0) {
                    feasible = false;
                    break;
                }
                trial_w[i] = v;
                trial_dual += v.ln();
            }
            if feasible && trial_dual >= dual - 1e-13 * (1.0 + dual.abs()) {
                for a in 0..q {
                    lambda[a] += step * delta[a];
                }
                std::mem::swap(&mut w, &mut trial_w);
                dual = trial_dual;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        let norm = lambda.iter().fold(0.0f64, |acc, l| acc.max(l.abs()));
        if !accepted || !norm.is_finite() || norm > 1e12 {
            return LambdaSolution { lambda, converged: false, iterations: it + 1, residual };
        }
        // lambda'U_i >= 0 for every row, positive for one: the dual grows
        // without bound along t * lambda, so 0 is not inside the hull
        let (lo, hi) = w.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if lo >= 1.0 && hi > 1.0 + 1e-8 {
            return LambdaSolution { lambda, converged: false, iterations: it + 1, residual };
        }
    }
    unreachable!("loop returns on its last iteration")
}

fn newton_direction(jac: &DMatrix<f64>, grad: &[f64]) -> Option<Vec<f64>> {
    // Symmetric diagonal scaling first: columns of U can differ in size by
    // many orders of magnitude (tiny cell probabilities).
    let q = grad.len();
    let scale: Vec<f64> =
        (0..q).map(|a| if jac[(a, a)] > 0.0 { 1.0 / jac[(a, a)].sqrt() } else { 1.0 }).collect();
    let scaled = DMatrix::from_fn(q, q, |a, b| jac[(a, b)] * scale[a] * scale[b]);
    let rhs = DVector::from_fn(q, |a, _| grad[a] * scale[a]);
    let unscale = |y: DVector<f64>| -> Option<Vec<f64>> {
        let d: Vec<f64> = y.iter().zip(&scale).map(|(v, s)| v * s).collect();
        d.iter().all(|v| v.is_finite()).then_some(d)
    };
    if let Some(chol) = scaled.clone().cholesky() {
        if let Some(d) = unscale(chol.solve(&rhs)) {
            return Some(d);
        }
    }
    // Rank-deficient rows: minimum-norm direction.
    let svd = scaled.svd(true, true);
    let smax = svd.singular_values.max();
    if !(smax > 0.0) {
        return None;
    }
    unscale(svd.solve(&rhs, smax * 1e-12).ok()?)
}

/// EL weights `p_i = (1/m) / (1 + lambda'U_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElWeights(pub Vec<f64>);

impl ElWeights {
    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// `sum_i p_i U_i` for the rows of `u`.
    pub fn weighted_mean(&self, u: &DMatrix<f64>) -> Vec<f64> {
        (0..u.ncols())
            .map(|c| self.0.iter().enumerate().map(|(i, p)| p * u[(i, c)]).sum())
            .collect()
    }
}

pub fn el_weights(lambda: &[f64], u: &DMatrix<f64>) -> Result<ElWeights> {
    if lambda.len() != u.ncols() {
        return Err(Error::DimensionMismatch { expected: u.ncols(), got: lambda.len() });
    }
    let m = u.nrows() as f64;
    (0..u.nrows())
        .map(|i| {
            let w = 1.0 + u.row(i).iter().zip(lambda).map(|(a, b)| a * b).sum::<f64>();
            if w > 0.0 {
                Ok(1.0 / (m * w))
            } else {
                Err(Error::InfeasibleMultiplier { row: i })
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(ElWeights)
}

/// Outcome of one profile log-likelihood evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// `-inf` when the multiplier solve failed.
    pub loglik: f64,
    pub lambda: LambdaSolution,
    /// Cells (indices into the family's cells) used as columns of the solve.
    pub columns: Vec<usize>,
    /// Gradient in `alpha` over all cells (zero for inactive cells).
    pub grad_alpha: Vec<f64>,
    pub grad_beta: Vec<f64>,
}

impl Evaluation {
    pub fn is_finite(&self) -> bool {
        self.loglik.is_finite()
    }
}

/// A dataset prepared for repeated evaluation of the profile empirical
/// log-likelihood.
#[derive(Debug, Clone)]
pub struct ElObjective {
    family: ModelFamily,
    counts: CellCounts,
    n: usize,
    m: usize,
    p: usize,
    /// Row-major m x p covariates of the complete cases.
    z: Vec<f64>,
    d: Vec<usize>,
    x: Vec<Option<u8>>,
    opts: LambdaOptions,
}

impl ElObjective {
    pub fn new(data: &CaptureDataset, family: Family) -> Result<Self> {
        let fam = ModelFamily::for_dataset(family, data)?;
        let counts = summarize(data, &fam)?;
        Self::with_counts(data, fam, counts)
    }

    pub fn with_counts(data: &CaptureDataset, family: ModelFamily, counts: CellCounts) -> Result<Self> {
        let m = data.m();
        if m == 0 {
            return Err(Error::NoCompleteCases);
        }
        if counts.counts.len() != family.n_cells() || counts.mask.0.len() != family.n_cells() {
            return Err(Error::DimensionMismatch { expected: family.n_cells(), got: counts.counts.len() });
        }
        let p = data.dim();
        let mut z = Vec::with_capacity(m * p);
        let mut d = Vec::with_capacity(m);
        let mut x = Vec::with_capacity(m);
        for r in data.complete() {
            z.extend_from_slice(r.covariates.as_ref().expect("complete record"));
            d.push(r.captures);
            x.push(r.always_observed);
        }
        if family.family() == Family::Extended && x.iter().any(Option::is_none) {
            return Err(Error::MissingAlwaysObserved);
        }
        Ok(ElObjective { family, counts, n: data.n(), m, p, z, d, x, opts: LambdaOptions::default() })
    }

    /// Replaces the active-constraint mask.
    pub fn with_mask(mut self, mask: ConstraintMask) -> Result<Self> {
        if mask.0.len() != self.family.n_cells() || !mask.is_active(0) {
            return Err(Error::Domain("mask must cover every cell and keep cell 0".into()));
        }
        self.counts.mask = mask;
        Ok(self)
    }

    pub fn with_lambda_options(mut self, opts: LambdaOptions) -> Self {
        self.opts = opts;
        self
    }

    pub fn family(&self) -> &ModelFamily {
        &self.family
    }

    pub fn counts(&self) -> &CellCounts {
        &self.counts
    }

    pub fn mask(&self) -> &ConstraintMask {
        &self.counts.mask
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn occasions(&self) -> usize {
        self.family.occasions()
    }

    pub fn lambda_options(&self) -> LambdaOptions {
        self.opts
    }

    pub(crate) fn covariates(&self, i: usize) -> &[f64] {
        &self.z[i * self.p..(i + 1) * self.p]
    }

    pub(crate) fn captures(&self, i: usize) -> usize {
        self.d[i]
    }

    pub(crate) fn always_observed(&self, i: usize) -> Option<u8> {
        self.x[i]
    }

    /// Count attached to cell `c` at abundance `nu`; cell 0 holds `nu - n`.
    pub fn cell_count(&self, c: usize, nu: f64) -> f64 {
        if c == 0 {
            nu - self.n as f64
        } else {
            self.counts.count(c) as f64
        }
    }

    /// Cells some complete case can fall in: every cell except extended cells
    /// whose always-observed level no complete case has.
    pub fn support_mask(&self) -> ConstraintMask {
        ConstraintMask(
            self.family
                .cells()
                .iter()
                .map(|cell| match cell {
                    Cell::Joint { j, .. } => self.x.contains(&Some(*j)),
                    _ => true,
                })
                .collect(),
        )
    }

    /// Whether the active cells exhaust the outcomes of every complete case:
    /// all cells are active, or the inactive ones belong to an always-observed
    /// level that no complete case has. Then the active components of `U` add
    /// up to `1 - sum(alpha)`.
    pub fn covers_simplex(&self) -> bool {
        self.family.cells().iter().enumerate().all(|(c, cell)| {
            self.mask().is_active(c)
                || matches!(cell, Cell::Joint { j, .. } if !self.x.contains(&Some(*j)))
        })
    }

    /// On the simplex one column of the multiplier system is redundant and
    /// the last active cell is left out of the solve.
    pub fn solve_columns(&self, alpha: &[f64]) -> Vec<usize> {
        let mut cols = self.mask().active_indices();
        if cols.len() > 1 && self.covers_simplex() {
            let s: f64 = cols.iter().map(|&c| alpha[c]).sum();
            if (s - 1.0).abs() <= SIMPLEX_TOL {
                cols.pop();
            }
        }
        cols
    }

    /// `m alpha_c` per column: the size of `sum_i U_i` when a cell is rare.
    fn column_scale(&self, alpha: &[f64], columns: &[usize]) -> Vec<f64> {
        columns.iter().map(|&c| self.m as f64 * alpha[c]).collect()
    }

    /// Cell probabilities of every cell for complete case `i`.
    pub(crate) fn cell_row(&self, i: usize, beta: &[f64], out: &mut [f64]) -> (f64, f64) {
        let eta: f64 = self.covariates(i).iter().zip(beta).map(|(a, b)| a * b).sum();
        let (g, h) = (logistic(eta), logistic(-eta));
        for (c, &cell) in self.family.cells().iter().enumerate() {
            out[c] = self.family.cell_value(cell, g, h, self.x[i]);
        }
        (g, eta)
    }

    /// Builds the m x q constraint matrix for the given columns.
    pub fn constraint_matrix(&self, alpha: &[f64], beta: &[f64], columns: &[usize]) -> DMatrix<f64> {
        let q = columns.len();
        let mut cells = vec![0.0; self.family.n_cells()];
        let mut u = DMatrix::zeros(self.m, q);
        for i in 0..self.m {
            self.cell_row(i, beta, &mut cells);
            for (a, &c) in columns.iter().enumerate() {
                u[(i, a)] = cells[c] - alpha[c];
            }
        }
        u
    }

    fn check_domain(&self, nu: f64, alpha: &[f64], beta: &[f64]) -> Result<()> {
        if alpha.len() != self.family.n_cells() {
            return Err(Error::DimensionMismatch { expected: self.family.n_cells(), got: alpha.len() });
        }
        if beta.len() != self.p {
            return Err(Error::DimensionMismatch { expected: self.p, got: beta.len() });
        }
        if !(nu >= self.n as f64) || !nu.is_finite() {
            return Err(Error::Domain(format!("abundance {nu} is below n = {}", self.n)));
        }
        for c in self.mask().active_indices() {
            if !(alpha[c] > 0.0 && alpha[c] < 1.0) {
                return Err(Error::Domain(format!("alpha[{c}] = {} outside (0, 1)", alpha[c])));
            }
        }
        Ok(())
    }

    /// Profile empirical log-likelihood at `(nu, alpha, beta)`.
    pub fn loglik(&self, nu: f64, alpha: &[f64], beta: &[f64]) -> Result<f64> {
        Ok(self.evaluate(nu, alpha, beta, false)?.loglik)
    }

    /// Evaluates the profile log-likelihood and, when `gradient` is set, its
    /// gradient in `(alpha, beta)` at fixed `nu`. The gradient uses the
    /// envelope property of the multiplier, so no derivative of `lambda` is
    /// needed.
    pub fn evaluate(&self, nu: f64, alpha: &[f64], beta: &[f64], gradient: bool) -> Result<Evaluation> {
        self.check_domain(nu, alpha, beta)?;
        let columns = self.solve_columns(alpha);
        let (m, q, nc, p) = (self.m, columns.len(), self.family.n_cells(), self.p);
        let kk = self.family.occasions() as f64;

        let mut cells = vec![0.0; nc];
        let mut u = vec![0.0; m * q];
        let mut g = vec![0.0; m];
        let mut binom_ll = 0.0;
        let mut bvals = if gradient { vec![0.0; m * q] } else { Vec::new() };
        for i in 0..m {
            let (gi, eta) = self.cell_row(i, beta, &mut cells);
            g[i] = gi;
            let di = self.d[i] as f64;
            binom_ll += di * log_logistic(eta) + (kk - di) * log_logistic(-eta);
            for (a, &c) in columns.iter().enumerate() {
                u[i * q + a] = cells[c] - alpha[c];
                if gradient {
                    bvals[i * q + a] = cells[c];
                }
            }
        }

        let lambda = solve_lambda_rows(&u, m, q, self.opts, Some(&self.column_scale(alpha, &columns)));
        let mut grad_alpha = vec![0.0; nc];
        let mut grad_beta = vec![0.0; p];
        if !lambda.converged {
            return Ok(Evaluation { loglik: f64::NEG_INFINITY, lambda, columns, grad_alpha, grad_beta });
        }

        let n = self.n as f64;
        let mut ll = ln_choose(nu, n) + binom_ll;
        for c in self.mask().active_indices() {
            let mc = self.cell_count(c, nu);
            if mc > 0.0 {
                ll += mc * alpha[c].ln();
            }
        }
        let mut w = vec![0.0; m];
        for i in 0..m {
            let row = &u[i * q..(i + 1) * q];
            w[i] = 1.0 + row.iter().zip(&lambda.lambda).map(|(a, b)| a * b).sum::<f64>();
            ll -= w[i].ln();
        }

        if gradient {
            let mf = m as f64;
            for c in self.mask().active_indices() {
                grad_alpha[c] = self.cell_count(c, nu) / alpha[c];
            }
            for (a, &c) in columns.iter().enumerate() {
                grad_alpha[c] += mf * lambda.lambda[a];
            }
            let cells_k: Vec<f64> = columns.iter().map(|&c| self.family.cells()[c].captures() as f64).collect();
            for i in 0..m {
                let gi = g[i];
                let mut s = 0.0;
                for a in 0..q {
                    s += lambda.lambda[a] * bvals[i * q + a] * (cells_k[a] - kk * gi);
                }
                let coef = (self.d[i] as f64 - kk * gi) - s / w[i];
                for (gb, zv) in grad_beta.iter_mut().zip(self.covariates(i)) {
                    *gb += coef * zv;
                }
            }
        }
        Ok(Evaluation { loglik: ll, lambda, columns, grad_alpha, grad_beta })
    }

    /// EL weights at `(alpha, beta)`, or `None` if the multiplier solve fails.
    pub fn weights(&self, alpha: &[f64], beta: &[f64]) -> Option<(ElWeights, LambdaSolution, Vec<usize>)> {
        let columns = self.solve_columns(alpha);
        let u = self.constraint_matrix(alpha, beta, &columns);
        let rows: Vec<f64> = (0..u.nrows()).flat_map(|i| u.row(i).iter().copied().collect::<Vec<_>>()).collect();
        let sol = solve_lambda_rows(&rows, u.nrows(), u.ncols(), self.opts, Some(&self.column_scale(alpha, &columns)));
        if !sol.converged {
            return None;
        }
        let w = el_weights(&sol.lambda, &u).ok()?;
        Some((w, sol, columns))
    }

    /// Maximizes over `alpha` at fixed `(nu, beta)` through the equivalent
    /// concave problem in the weights:
    /// `max_p sum_i log p_i + sum_c m_c log(sum_i p_i b_c(Z_i))`,
    /// by its monotone EM iteration `p_i <- (1 + p_i sum_c m_c b_ic / gamma_c) / nu`.
    /// Returns the full `alpha` (every cell, active or not) and the weights.
    pub fn profile_alpha(&self, nu: f64, beta: &[f64], max_iter: usize, tol: f64) -> (Vec<f64>, Vec<f64>) {
        let (m, nc) = (self.m, self.family.n_cells());
        let mut b = vec![0.0; m * nc];
        let mut row = vec![0.0; nc];
        for i in 0..m {
            self.cell_row(i, beta, &mut row);
            b[i * nc..(i + 1) * nc].copy_from_slice(&row);
        }
        let active = self.mask().active_indices();
        let mc: Vec<f64> = active.iter().map(|&c| self.cell_count(c, nu)).collect();
        let total = m as f64 + mc.iter().sum::<f64>();
        let mut p = vec![1.0 / m as f64; m];
        let mut gamma = vec![0.0; nc];
        let fill_gamma = |p: &[f64], gamma: &mut [f64]| {
            gamma.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..m {
                for c in 0..nc {
                    gamma[c] += p[i] * b[i * nc + c];
                }
            }
        };
        for _ in 0..max_iter {
            fill_gamma(&p, &mut gamma);
            let mut change = 0.0f64;
            for i in 0..m {
                let mut s = 0.0;
                for (a, &c) in active.iter().enumerate() {
                    if mc[a] > 0.0 && gamma[c] > 0.0 {
                        s += mc[a] * b[i * nc + c] / gamma[c];
                    }
                }
                let np = (1.0 + p[i] * s) / total;
                change = change.max((np - p[i]).abs() / p[i]);
                p[i] = np;
            }
            if change < tol {
                break;
            }
        }
        fill_gamma(&p, &mut gamma);
        (gamma, p)
    }

    /// Derivative of the profile log-likelihood in `nu` at fixed `alpha`:
    /// `psi(nu + 1) - psi(nu - n + 1) + log gamma_0`.
    pub fn dloglik_dnu(&self, nu: f64, gamma0: f64) -> f64 {
        let n = self.n as f64;
        digamma(nu + 1.0) - digamma(nu - n + 1.0) + gamma0.ln()
    }
}

/// Profile empirical log-likelihood `l(nu, alpha, beta)` (or its extended
/// counterpart) for a dataset under a given active-constraint mask.
/// Returns `-inf` when the multiplier solve fails.
pub fn profile_loglik(
    nu: f64,
    alpha: &[f64],
    beta: &[f64],
    data: &CaptureDataset,
    family: Family,
    mask: Option<&ConstraintMask>,
) -> Result<f64> {
    let mut obj = ElObjective::new(data, family)?;
    if let Some(mask) = mask {
        obj = obj.with_mask(mask.clone())?;
    }
    obj.loglik(nu, alpha, beta)
}
