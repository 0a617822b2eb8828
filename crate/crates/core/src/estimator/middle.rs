//! The `(alpha, beta)` layer: maximization of the profile log-likelihood at a
//! fixed abundance, on a transformed scale where every point is in-domain.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::el::ElObjective;
use crate::optim::{inf_norm, maximize_bfgs, BfgsOptions, Status};
use crate::special::{logistic, logit};

/// Gradient norm below which a stalled BFGS run is still accepted.
pub(crate) const STALL_ACCEPT: f64 = 1e-4;

/// Maps an unconstrained vector to `(alpha, beta)`.
///
/// The active components of `alpha` are log-ratios against cell 0. When the
/// active cells cover every outcome they fill the simplex; otherwise one more
/// coordinate carries the mass left to the inactive cells, so the active
/// components always sum to less than one. Fixed coefficients of `beta` are
/// excluded from the vector.
#[derive(Debug, Clone)]
pub(crate) struct Transform {
    slack: bool,
    active: Vec<usize>,
    n_cells: usize,
    free_beta: Vec<usize>,
    beta_template: Vec<f64>,
}

impl Transform {
    pub(crate) fn new(obj: &ElObjective, fixed: &[(usize, f64)]) -> Self {
        let mask = obj.mask();
        let active = mask.active_indices();
        let mut beta_template = vec![0.0; obj.dim()];
        for &(j, v) in fixed {
            beta_template[j] = v;
        }
        let free_beta = (0..obj.dim()).filter(|j| !fixed.iter().any(|(f, _)| f == j)).collect();
        Transform {
            slack: !(obj.covers_simplex() && active.len() > 1),
            active,
            n_cells: obj.family().n_cells(),
            free_beta,
            beta_template,
        }
    }

    fn n_alpha(&self) -> usize {
        self.active.len() - 1 + usize::from(self.slack)
    }

    pub(crate) fn dim(&self) -> usize {
        self.n_alpha() + self.free_beta.len()
    }

    pub(crate) fn fixed_beta(&self, beta: &mut [f64]) {
        for (j, b) in beta.iter_mut().enumerate() {
            if !self.free_beta.contains(&j) {
                *b = self.beta_template[j];
            }
        }
    }

    pub(crate) fn unpack(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let na = self.n_alpha();
        let mut alpha = vec![0.0; self.n_cells];
        let mx = x[..na].iter().fold(0.0f64, |a, &v| a.max(v));
        let mut s = (-mx).exp();
        alpha[0] = s;
        for (a, &c) in self.active.iter().enumerate().skip(1) {
            alpha[c] = (x[a - 1] - mx).exp();
            s += alpha[c];
        }
        if self.slack {
            s += (x[na - 1] - mx).exp();
        }
        alpha.iter_mut().for_each(|a| *a /= s);
        let mut beta = self.beta_template.clone();
        for (a, &j) in self.free_beta.iter().enumerate() {
            beta[j] = x[na + a];
        }
        (alpha, beta)
    }

    /// Inverse of `unpack`. The slack mass is the total over inactive cells
    /// when given, otherwise what the active cells leave.
    pub(crate) fn pack(&self, alpha: &[f64], beta: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim());
        let l0 = alpha[0].ln();
        x.extend(self.active[1..].iter().map(|&c| alpha[c].ln() - l0));
        if self.slack {
            let rest: f64 = (0..self.n_cells).filter(|c| !self.active.contains(c)).map(|c| alpha[c]).sum();
            let rest = if rest > 0.0 { rest } else { 1.0 - self.active.iter().map(|&c| alpha[c]).sum::<f64>() };
            x.push(rest.max(1e-300).ln() - l0);
        }
        x.extend(self.free_beta.iter().map(|&j| beta[j]));
        x
    }

    fn chain(&self, x: &[f64], alpha: &[f64], grad_alpha: &[f64], grad_beta: &[f64]) -> Vec<f64> {
        let mut g = Vec::with_capacity(self.dim());
        let mean: f64 = self.active.iter().map(|&c| alpha[c] * grad_alpha[c]).sum();
        g.extend(self.active[1..].iter().map(|&c| alpha[c] * (grad_alpha[c] - mean)));
        if self.slack {
            let rest = alpha[0] * x[self.n_alpha() - 1].exp();
            g.push(-rest * mean);
        }
        g.extend(self.free_beta.iter().map(|&j| grad_beta[j]));
        g
    }
}

/// Maximizer of the profile log-likelihood at one abundance value.
#[derive(Debug, Clone)]
pub(crate) struct MiddleSolution {
    pub nu: f64,
    pub x: Vec<f64>,
    pub hinv: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub loglik: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub status: Status,
}

impl MiddleSolution {
    pub(crate) fn acceptable(&self) -> bool {
        self.loglik.is_finite()
            && (self.status == Status::Converged || self.grad_norm <= STALL_ACCEPT)
    }

    pub(crate) fn gamma0(&self) -> f64 {
        self.alpha[0]
    }
}

fn value_grad(obj: &ElObjective, tr: &Transform, nu: f64, x: &[f64]) -> Option<(f64, Vec<f64>)> {
    let (alpha, beta) = tr.unpack(x);
    let ev = obj.evaluate(nu, &alpha, &beta, true).ok()?;
    ev.is_finite().then(|| (ev.loglik, tr.chain(x, &alpha, &ev.grad_alpha, &ev.grad_beta)))
}

/// Inverse of the negated Hessian at `x` from forward differences of the
/// gradient, or of its absolute diagonal where it is not positive definite.
/// Seeds BFGS at cold starts.
pub(crate) fn curvature_seed(obj: &ElObjective, tr: &Transform, nu: f64, x: &[f64]) -> Option<Vec<f64>> {
    let d = x.len();
    let (_, g0) = value_grad(obj, tr, nu, x)?;
    let mut h = DMatrix::<f64>::zeros(d, d);
    let mut xp = x.to_vec();
    for j in 0..d {
        let step = 1e-5 * (1.0 + x[j].abs());
        xp[j] = x[j] + step;
        let (_, g1) = value_grad(obj, tr, nu, &xp)?;
        xp[j] = x[j];
        for i in 0..d {
            h[(i, j)] = -(g1[i] - g0[i]) / step;
        }
    }
    let h = (&h + h.transpose()) * 0.5;
    let inv = match h.clone().cholesky() {
        Some(c) => c.inverse(),
        None => DMatrix::from_diagonal(&h.diagonal().map(|v| 1.0 / v.abs().max(1e-8))),
    };
    inv.iter().all(|v| v.is_finite()).then(|| inv.transpose().iter().copied().collect())
}

pub(crate) fn solve(
    obj: &ElObjective,
    tr: &Transform,
    nu: f64,
    x0: &[f64],
    hinv0: Option<&[f64]>,
    opts: BfgsOptions,
) -> MiddleSolution {
    let r = maximize_bfgs(|x| value_grad(obj, tr, nu, x), x0, hinv0, opts);
    let (alpha, beta) = tr.unpack(&r.x);
    MiddleSolution {
        nu,
        grad_norm: if r.f.is_finite() { inf_norm(&r.grad) } else { f64::INFINITY },
        alpha,
        beta,
        loglik: r.f,
        x: r.x,
        hinv: r.hinv,
        iterations: r.iterations,
        status: r.status,
    }
}

/// Cold start at `nu`: `alpha` maximized for the given `beta` by the EM
/// iteration over the weights, which always lands inside the feasible region.
pub(crate) fn cold_start(obj: &ElObjective, tr: &Transform, nu: f64, beta: &[f64]) -> Vec<f64> {
    let mut beta = beta.to_vec();
    tr.fixed_beta(&mut beta);
    let (mut alpha, _) = obj.profile_alpha(nu, &beta, 300, 1e-10);
    for a in alpha.iter_mut() {
        *a = a.clamp(1e-300, 1.0 - 1e-16);
    }
    if !tr.slack {
        let s: f64 = tr.active.iter().map(|&c| alpha[c]).sum();
        alpha.iter_mut().for_each(|a| *a /= s);
    }
    tr.pack(&alpha, &beta)
}

/// Jittered coefficient vectors for restarts, reproducible from `seed`.
pub(crate) fn jitter(beta: &[f64], seed: u64, count: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|r| {
            let scale = 0.1 * (r + 1) as f64;
            beta.iter().map(|b| b + scale * (1.0 + b.abs()) * rng.random_range(-1.0..1.0)).collect()
        })
        .collect()
}

/// Logistic regression of `D_i / K` on `Z_i` over the complete cases
/// (binomial with `K` trials), by Newton-Raphson. Used only as a start.
pub(crate) fn binomial_glm(obj: &ElObjective, fixed: &[(usize, f64)]) -> Vec<f64> {
    let p = obj.dim();
    let kk = obj.occasions() as f64;
    let free: Vec<usize> = (0..p).filter(|j| !fixed.iter().any(|(f, _)| f == j)).collect();
    let mut beta = vec![0.0; p];
    for &(j, v) in fixed {
        beta[j] = v;
    }
    if free.is_empty() {
        return beta;
    }
    // start from the pooled capture rate
    let mean_rate: f64 = (0..obj.m()).map(|i| obj.captures(i) as f64).sum::<f64>() / (kk * obj.m() as f64);
    if free.contains(&0) {
        beta[0] = logit(mean_rate.clamp(0.01, 0.99));
    }
    let q = free.len();
    for _ in 0..50 {
        let mut grad = DVector::<f64>::zeros(q);
        let mut info = DMatrix::<f64>::zeros(q, q);
        for i in 0..obj.m() {
            let z = obj.covariates(i);
            let eta: f64 = z.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let g = logistic(eta);
            let r = obj.captures(i) as f64 - kk * g;
            let w = kk * g * (1.0 - g);
            for (a, &ja) in free.iter().enumerate() {
                grad[a] += r * z[ja];
                for (b, &jb) in free.iter().enumerate() {
                    info[(a, b)] += w * z[ja] * z[jb];
                }
            }
        }
        for a in 0..q {
            info[(a, a)] += 1e-8;
        }
        let Some(step) = info.cholesky().map(|c| c.solve(&grad)) else { break };
        let size = step.amax();
        let damp = if size > 5.0 { 5.0 / size } else { 1.0 };
        for (a, &j) in free.iter().enumerate() {
            beta[j] += damp * step[a];
        }
        if size < 1e-10 || !beta.iter().all(|b| b.is_finite()) {
            break;
        }
    }
    if beta.iter().all(|b| b.is_finite()) {
        beta
    } else {
        let mut b = vec![0.0; p];
        for &(j, v) in fixed {
            b[j] = v;
        }
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{cell_prob, CaptureDataset, Family, Record};
    use crate::simulation::{generate, Scenario, ScenarioConfig};
    use approx::assert_relative_eq;

    fn small() -> CaptureDataset {
        let recs = vec![
            Record::complete(1, vec![1.0, 0.2]),
            Record::complete(2, vec![1.0, 1.4]),
            Record::complete(1, vec![1.0, 0.7]),
            Record::complete(3, vec![1.0, 2.1]),
            Record::complete(2, vec![1.0, 1.0]),
            Record::missing(1),
            Record::missing(2),
            Record::missing(3),
        ];
        CaptureDataset::new(3, recs).unwrap()
    }

    #[test]
    fn transform_round_trips() {
        let obj = ElObjective::new(&small(), Family::Base).unwrap();
        let tr = Transform::new(&obj, &[]);
        assert!(!tr.slack);
        let alpha = [0.4, 0.3, 0.2, 0.1];
        let beta = [-1.0, 0.5];
        let (a2, b2) = tr.unpack(&tr.pack(&alpha, &beta));
        for (x, y) in a2.iter().zip(&alpha) {
            assert_relative_eq!(x, y, epsilon = 1e-15);
        }
        assert_eq!(b2, beta.to_vec());

        let tr = Transform::new(&obj, &[(1, 0.0)]);
        assert_eq!(tr.dim(), 4);
        let (_, b3) = tr.unpack(&tr.pack(&alpha, &[-1.0, 0.7]));
        assert_eq!(b3, vec![-1.0, 0.0]);

        // no incomplete record in cell 3: its mass goes to the slack coordinate
        let mut recs = small().records().to_vec();
        recs.pop();
        let obj = ElObjective::new(&CaptureDataset::new(3, recs).unwrap(), Family::Base).unwrap();
        let tr = Transform::new(&obj, &[]);
        assert!(tr.slack);
        assert_eq!(tr.dim(), 5);
        let (a4, _) = tr.unpack(&tr.pack(&alpha, &beta));
        for (x, y) in a4.iter().zip(&[0.4, 0.3, 0.2, 0.0]) {
            assert_relative_eq!(x, y, epsilon = 1e-15);
        }
    }

    #[test]
    fn chained_gradient_matches_finite_differences() {
        // K = 2 so the feasible alpha region has some width
        let cfg = ScenarioConfig::scenario(Scenario::A, 400);
        let data = generate(&cfg, 3);
        let obj = ElObjective::new(&data, Family::Base).unwrap();
        let tr = Transform::new(&obj, &[]);
        let nu = 420.0;
        // alpha as an uneven mixture of the complete-case cell vectors: strictly
        // inside the feasible hull but away from the alpha optimum
        let beta = [-0.8, 0.4];
        let fam = obj.family();
        let zs: Vec<&[f64]> = data.complete().map(|r| r.covariates.as_deref().unwrap()).collect();
        let w: Vec<f64> = (0..zs.len()).map(|i| 1.0 + 0.3 * (i as f64).sin()).collect();
        let total: f64 = w.iter().sum();
        let alpha: Vec<f64> = (0..fam.n_cells())
            .map(|c| {
                if !obj.mask().is_active(c) {
                    return 0.0;
                }
                let cell = fam.cells()[c];
                zs.iter().zip(&w).map(|(z, wi)| wi * cell_prob(z, None, cell, fam, &beta).unwrap()).sum::<f64>()
                    / total
            })
            .collect();
        let x0 = tr.pack(&alpha, &beta);
        let f = |x: &[f64]| {
            let (a, b) = tr.unpack(x);
            obj.evaluate(nu, &a, &b, true).unwrap()
        };
        let ev = f(&x0);
        assert!(ev.loglik.is_finite());
        let (a, _) = tr.unpack(&x0);
        let g = tr.chain(&x0, &a, &ev.grad_alpha, &ev.grad_beta);
        for j in 0..x0.len() {
            let h = 1e-5;
            let at = |t: f64| {
                let mut x = x0.clone();
                x[j] += t;
                f(&x).loglik
            };
            // fourth-order stencil; the alpha gradient is large here
            let fd = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            assert_relative_eq!(g[j], fd, epsilon = 1e-6, max_relative = 1e-5);
        }
    }

    #[test]
    fn glm_start_is_finite() {
        let obj = ElObjective::new(&small(), Family::Base).unwrap();
        let b = binomial_glm(&obj, &[]);
        assert!(b.iter().all(|v| v.is_finite()));
        let b = binomial_glm(&obj, &[(1, 0.0)]);
        assert_eq!(b[1], 0.0);
    }
}
