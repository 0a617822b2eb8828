//! Plug-in estimate of the asymptotic information matrix `W` of
//! `sqrt(nu0) {log(nu_hat / nu0), alpha_hat - alpha0, beta_hat - beta0}` and a
//! Wald interval on `log(nu)` built from it.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::el::ElObjective;
use crate::error::{Error, Result};
use crate::estimator::FitResult;
use crate::model::{CaptureDataset, Cell, Family, ModelFamily};
use crate::special::{logistic, normal_quantile};

/// Condition number above which `W` is reported as near-singular.
pub const CONDITION_WARN: f64 = 1e10;

/// Estimated selection probabilities `pr(R = 1 | cell)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionEstimate {
    /// Aligned with the family's cells; entry 0 is unused and set to 0.
    pub h: Vec<f64>,
    /// `false` where no individual falls in the cell.
    pub defined: Vec<bool>,
    pub complete: Vec<usize>,
    pub total: Vec<usize>,
}

/// Cell proportion of complete records.
pub fn estimate_h(data: &CaptureDataset, family: Family) -> Result<SelectionEstimate> {
    let obj = ElObjective::new(data, family)?;
    Ok(estimate_h_obj(&obj))
}

fn cell_of(fam: &ModelFamily, k: usize, x: Option<u8>) -> Option<usize> {
    match fam.family() {
        Family::Base => fam.cell_index(Cell::Count { k }),
        Family::Extended => fam.cell_index(Cell::Joint { j: x?, k }),
    }
}

pub(crate) fn estimate_h_obj(obj: &ElObjective) -> SelectionEstimate {
    let fam = obj.family();
    let nc = fam.n_cells();
    let mut complete = vec![0usize; nc];
    for i in 0..obj.m() {
        if let Some(c) = cell_of(fam, obj.captures(i), obj.always_observed(i)) {
            complete[c] += 1;
        }
    }
    let total: Vec<usize> = (0..nc).map(|c| if c == 0 { 0 } else { complete[c] + obj.counts().count(c) }).collect();
    let defined: Vec<bool> = (0..nc).map(|c| c > 0 && total[c] > 0).collect();
    let h = (0..nc).map(|c| if defined[c] { complete[c] as f64 / total[c] as f64 } else { 0.0 }).collect();
    SelectionEstimate { h, defined, complete, total }
}

/// Cell probabilities, `pi`, its first two derivatives in `beta`, and
/// `dU'/dbeta` for one covariate point.
#[derive(Debug, Clone)]
pub struct PointDerivatives {
    pub g: f64,
    pub b: Vec<f64>,
    pub pi: f64,
    pub pi_dot: DVector<f64>,
    pub pi_ddot: DMatrix<f64>,
    /// `p x C`; column `c` is `b_c (k_c - K g) z`.
    pub du_dbeta: DMatrix<f64>,
}

/// Evaluates the quantities above at `z` (and `x` for the extended family)
/// with selection probabilities `h` aligned to the family's cells.
pub fn point_derivatives(z: &[f64], x: Option<u8>, beta: &[f64], fam: &ModelFamily, h: &[f64]) -> PointDerivatives {
    let p = z.len();
    let kk = fam.occasions() as f64;
    let eta: f64 = z.iter().zip(beta).map(|(a, b)| a * b).sum();
    let (g, q) = (logistic(eta), logistic(-eta));
    let zv = DVector::from_column_slice(z);
    let zz = &zv * zv.transpose();
    let nc = fam.n_cells();
    let mut b = vec![0.0; nc];
    let mut pi = 0.0;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut du = DMatrix::zeros(p, nc);
    for (c, &cell) in fam.cells().iter().enumerate() {
        b[c] = fam.cell_value(cell, g, q, x);
        let r = cell.captures() as f64 - kk * g;
        du.set_column(c, &(&zv * (b[c] * r)));
        if c > 0 {
            pi += h[c] * b[c];
            s1 += h[c] * b[c] * r;
            s2 += h[c] * b[c] * (r * r - kk * g * q);
        }
    }
    PointDerivatives { g, b, pi, pi_dot: &zv * s1, pi_ddot: zz * s2, du_dbeta: du }
}

/// The blocks of `W` and its assembly.
#[derive(Debug, Clone, Serialize)]
pub struct WBlocks {
    pub family: Family,
    /// Cells kept (those with individuals, plus cell 0).
    pub cells: Vec<usize>,
    pub h: SelectionEstimate,
    pub lambda00: f64,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub v11: f64,
    pub v12: DVector<f64>,
    pub v22: DMatrix<f64>,
    pub v23: DMatrix<f64>,
    pub v24: DMatrix<f64>,
    pub v33: DMatrix<f64>,
    pub v34: DMatrix<f64>,
    pub v44: DMatrix<f64>,
    /// `W` with the multiplier block eliminated; `V44` is inverted by
    /// pseudo-inverse because it is singular on the simplex.
    pub w: DMatrix<f64>,
    /// Full matrix before eliminating the multiplier block.
    pub bordered: DMatrix<f64>,
    pub condition_number: f64,
    pub near_singular: bool,
}

impl WBlocks {
    /// Asymptotic covariance of `sqrt(nu0) (log nu_hat, alpha_hat, beta_hat)`:
    /// the leading block of the inverse of the bordered matrix, which equals
    /// `W^-1` whenever `V44` is invertible and stays defined when it is not.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        let d = self.w.nrows();
        let inv = self.bordered.clone().lu().try_inverse().or_else(|| self.bordered.clone().pseudo_inverse(1e-12).ok())?;
        Some(inv.view((0, 0), (d, d)).into_owned())
    }

    /// `[W^-1]_{11}`, the asymptotic variance of `sqrt(nu0) log(nu_hat / nu0)`.
    pub fn inverse_11(&self) -> Option<f64> {
        self.covariance().map(|c| c[(0, 0)]).filter(|v| v.is_finite() && *v > 0.0)
    }
}

/// Plug-in `W`: expectations over the covariate distribution are weighted by
/// the fitted EL weights.
pub fn estimate_w(obj: &ElObjective, fit: &FitResult) -> Result<WBlocks> {
    if fit.weights.len() != obj.m() {
        return Err(Error::Domain("fit carries no EL weights".into()));
    }
    let fam = obj.family();
    let hs = estimate_h_obj(obj);
    let cells: Vec<usize> = (0..fam.n_cells()).filter(|&c| c == 0 || hs.defined[c]).collect();
    let nc = cells.len();
    let p = obj.dim();
    let alpha: Vec<f64> = cells.iter().map(|&c| fit.alpha_hat[c]).collect();
    let h: Vec<f64> = cells.iter().map(|&c| hs.h[c]).collect();

    let s: f64 = (1..nc).map(|a| h[a] * alpha[a]).sum();
    if !(s > 0.0) {
        return Err(Error::Singular("no observed cell has positive selection probability".into()));
    }
    let lambda00 = -1.0 / s;
    let h1 = DVector::from_iterator(nc, (0..nc).map(|a| if a == 0 { 1.0 } else { 1.0 - h[a] }));
    let h2: Vec<f64> = (0..nc).map(|a| if a == 0 { 1.0 / alpha[0] } else { (1.0 - h[a]) / alpha[a] }).collect();

    let mut e_inv_pi = 0.0;
    let mut e_pidot_pi = DVector::zeros(p);
    let mut e_u_pi = DVector::zeros(nc);
    let mut v33 = DMatrix::zeros(p, p);
    let mut e34 = DMatrix::zeros(p, nc);
    let mut e_uu_pi = DMatrix::zeros(nc, nc);
    let kk = fam.occasions() as f64;
    let h_full = &hs.h;
    for (i, &w) in fit.weights.iter().enumerate() {
        let z = obj.covariates(i);
        let d = point_derivatives(z, obj.always_observed(i), &fit.beta_hat, fam, h_full);
        if !(d.pi > 1e-12) {
            return Err(Error::Singular(format!("selection-capture probability {} at complete case {i}", d.pi)));
        }
        let u = DVector::from_iterator(nc, cells.iter().zip(&alpha).map(|(&c, a)| d.b[c] - a));
        let du = DMatrix::from_fn(p, nc, |r, a| d.du_dbeta[(r, cells[a])]);
        let zv = DVector::from_column_slice(z);
        e_inv_pi += w / d.pi;
        e_pidot_pi += &d.pi_dot * (w / d.pi);
        e_u_pi += &u * (w / d.pi);
        v33 += (&d.pi_ddot - &d.pi_dot * d.pi_dot.transpose() / d.pi + &zv * zv.transpose() * (kk * d.g * (1.0 - d.g) * d.pi)) * w;
        e34 += (du - &d.pi_dot * u.transpose() / d.pi) * w;
        e_uu_pi += &u * u.transpose() * (w / d.pi);
    }

    let v11 = 1.0 / alpha[0] - 1.0;
    let mut v12 = DVector::zeros(nc);
    v12[0] = -1.0 / alpha[0];
    let v22 = DMatrix::from_diagonal(&DVector::from_vec(h2.clone())) - &h1 * h1.transpose() * e_inv_pi;
    let v32 = -(&e_pidot_pi * h1.transpose());
    let v42 = (DMatrix::identity(nc, nc) + &e_u_pi * h1.transpose()) / lambda00;
    let v34 = -e34 / lambda00;
    let v44 = -e_uu_pi / (lambda00 * lambda00);
    let v23 = v32.transpose();
    let v24 = v42.transpose();

    let v44_inv = v44.clone().pseudo_inverse(1e-12).map_err(|e| Error::Singular(e.to_string()))?;
    let v43 = v34.transpose();
    let w22 = &v22 - &v24 * &v44_inv * &v42;
    let w23 = &v23 - &v24 * &v44_inv * &v43;
    let w33 = &v33 - &v34 * &v44_inv * &v43;

    let d = 1 + nc + p;
    let mut w = DMatrix::zeros(d, d);
    w[(0, 0)] = v11;
    for a in 0..nc {
        w[(0, 1 + a)] = v12[a];
        w[(1 + a, 0)] = v12[a];
    }
    w.view_mut((1, 1), (nc, nc)).copy_from(&w22);
    w.view_mut((1, 1 + nc), (nc, p)).copy_from(&w23);
    w.view_mut((1 + nc, 1), (p, nc)).copy_from(&w23.transpose());
    w.view_mut((1 + nc, 1 + nc), (p, p)).copy_from(&w33);

    let mut bordered = DMatrix::zeros(d + nc, d + nc);
    bordered[(0, 0)] = v11;
    for a in 0..nc {
        bordered[(0, 1 + a)] = v12[a];
        bordered[(1 + a, 0)] = v12[a];
    }
    bordered.view_mut((1, 1), (nc, nc)).copy_from(&v22);
    bordered.view_mut((1, 1 + nc), (nc, p)).copy_from(&v23);
    bordered.view_mut((1, d), (nc, nc)).copy_from(&v24);
    bordered.view_mut((1 + nc, 1), (p, nc)).copy_from(&v32);
    bordered.view_mut((1 + nc, 1 + nc), (p, p)).copy_from(&v33);
    bordered.view_mut((1 + nc, d), (p, nc)).copy_from(&v34);
    bordered.view_mut((d, 1), (nc, nc)).copy_from(&v42);
    bordered.view_mut((d, 1 + nc), (nc, p)).copy_from(&v43);
    bordered.view_mut((d, d), (nc, nc)).copy_from(&v44);

    let sv = w.clone().singular_values();
    let condition_number = sv.max() / sv.min();
    Ok(WBlocks {
        family: fam.family(),
        cells,
        h: hs,
        lambda00,
        h1: h1.iter().copied().collect(),
        h2,
        v11,
        v12,
        v22,
        v23,
        v24,
        v33,
        v34,
        v44,
        w,
        bordered,
        condition_number,
        near_singular: !(condition_number <= CONDITION_WARN),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaldInterval {
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
    /// Standard error of `log(nu_hat)`.
    pub se_log: f64,
    /// The lower limit falls below the number of distinct individuals seen.
    pub below_n: bool,
}

/// `nu_hat exp(+- z sqrt([W^-1]_11 / nu_hat))`.
pub fn wald_interval_lognu(fit: &FitResult, w: &WBlocks, level: f64) -> Result<WaldInterval> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("level {level} outside (0, 1)")));
    }
    let v = w.inverse_11().ok_or_else(|| Error::Singular("W is not invertible".into()))?;
    let se_log = (v / fit.nu_hat).sqrt();
    let z = normal_quantile(0.5 + 0.5 * level);
    let lower = fit.nu_hat * (-z * se_log).exp();
    Ok(WaldInterval { level, lower, upper: fit.nu_hat * (z * se_log).exp(), se_log, below_n: lower < fit.n as f64 })
}
