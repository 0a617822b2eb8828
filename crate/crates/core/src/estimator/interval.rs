//! Profile likelihood-ratio intervals for the abundance.

use serde::Serialize;

use super::Estimator;
use crate::error::{Error, Result};
use crate::optim::brent_root;
use crate::special::chi2_1_quantile;

#[derive(Debug, Clone, Serialize)]
pub struct IntervalResult {
    pub level: f64,
    /// Chi-square(1) quantile the ratio is compared against.
    pub threshold: f64,
    pub nu_hat: f64,
    pub lower: f64,
    pub upper: f64,
    /// The lower limit is `n` because `R'(n)` is below the threshold.
    pub lower_at_n: bool,
    /// The ratio never crossed the threshold below the search cap; `upper`
    /// is the cap and the interval is unbounded in practice.
    pub upper_capped: bool,
    /// Every `(nu, R'(nu))` evaluated while locating the endpoints.
    pub trace: Vec<(f64, f64)>,
}

impl IntervalResult {
    pub fn contains(&self, nu: f64) -> bool {
        self.lower <= nu && nu <= self.upper
    }
}

impl Estimator {
    /// `{nu : R'(nu) <= chi2_1(level)}`, located by root finding on each side
    /// of the estimate.
    pub fn confidence_interval(&mut self, level: f64) -> Result<IntervalResult> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::Domain(format!("level {level} outside (0, 1)")));
        }
        let q = chi2_1_quantile(level);
        self.interval_at(level, q)
    }

    /// One-sided lower and upper limits at `level`: the two-sided interval
    /// whose tails each carry `1 - level`.
    pub fn one_sided_limits(&mut self, level: f64) -> Result<IntervalResult> {
        if !(level > 0.5 && level < 1.0) {
            return Err(Error::Domain(format!("one-sided level {level} outside (0.5, 1)")));
        }
        let q = chi2_1_quantile(2.0 * level - 1.0);
        self.interval_at(level, q)
    }

    fn interval_at(&mut self, level: f64, q: f64) -> Result<IntervalResult> {
        let fit = self.fit()?;
        let nu_hat = fit.nu_hat;
        let cap = fit.diagnostics.nu_cap;
        let n = self.obj.n() as f64;
        let ftol = 1e-6f64.min(1e-3 * q);
        let mut trace = Vec::new();
        let mut r = |est: &mut Estimator, nu: f64, trace: &mut Vec<(f64, f64)>| -> Result<f64> {
            let v = est.ratio_profile(nu)?;
            trace.push((nu, v));
            Ok(v)
        };

        let (lower, lower_at_n) = if nu_hat - n <= 1e-12 * n {
            (n, true)
        } else {
            let rn = r(self, n, &mut trace)?;
            if rn <= q {
                (n, true)
            } else {
                let root = root_on(self, &mut r, &mut trace, n, nu_hat, rn - q, -q, q, ftol)?;
                (root, false)
            }
        };

        let mut step = (nu_hat - n).max(1.0);
        let (mut lo, mut f_lo) = (nu_hat, -q);
        let (upper, upper_capped) = loop {
            let hi = (nu_hat + step).min(cap);
            let rh = r(self, hi, &mut trace)?;
            if rh > q {
                break (root_on(self, &mut r, &mut trace, lo, hi, f_lo, rh - q, q, ftol)?, false);
            }
            if hi >= cap {
                break (cap, true);
            }
            lo = hi;
            f_lo = rh - q;
            step *= 2.0;
        };
        Ok(IntervalResult { level, threshold: q, nu_hat, lower, upper, lower_at_n, upper_capped, trace })
    }
}

#[allow(clippy::too_many_arguments)]
fn root_on<F>(
    est: &mut Estimator,
    r: &mut F,
    trace: &mut Vec<(f64, f64)>,
    a: f64,
    b: f64,
    fa: f64,
    fb: f64,
    q: f64,
    ftol: f64,
) -> Result<f64>
where
    F: FnMut(&mut Estimator, f64, &mut Vec<(f64, f64)>) -> Result<f64>,
{
    let mut err = None;
    let root = brent_root(
        |nu| match r(est, nu, trace) {
            Ok(v) => v - q,
            Err(e) => {
                err.get_or_insert(e);
                f64::NAN
            }
        },
        a,
        b,
        fa,
        fb,
        1e-13,
        ftol,
    );
    match err {
        Some(e) => Err(e),
        None => Ok(root.x),
    }
}
