//! Scalar special functions used throughout the crate.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

pub use statrs::function::gamma::digamma;

/// Logistic function `e^x / (1 + e^x)`, branching on the sign of `x` so that
/// neither branch can overflow.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log g(x)` for the logistic `g`.
#[inline]
pub fn log_logistic(x: f64) -> f64 {
    -softplus(-x)
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log C(nu, n)` for real `nu >= n`.
pub fn ln_choose(nu: f64, n: f64) -> f64 {
    if nu == n || n == 0.0 {
        return 0.0;
    }
    ln_gamma(nu + 1.0) - ln_gamma(n + 1.0) - ln_gamma(nu - n + 1.0)
}

/// Upper quantile of chi-square with one degree of freedom: the value `q`
/// with `P(X <= q) = level`.
pub fn chi2_1_quantile(level: f64) -> f64 {
    if level <= 0.0 {
        return 0.0;
    }
    // chi2_1(level) = z_{(1+level)/2}^2 is far more accurate than inverting the
    // gamma cdf near zero.
    let z = normal_quantile(0.5 + 0.5 * level);
    z * z
}

pub fn chi2_1_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    ChiSquared::new(1.0).expect("valid dof").cdf(x)
}

/// Upper tail `P(X > x)` for chi-square with one degree of freedom.
pub fn chi2_1_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    ChiSquared::new(1.0).expect("valid dof").sf(x)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn logistic_is_stable_in_both_tails() {
        assert_eq!(logistic(0.0), 0.5);
        assert_relative_eq!(logistic(-2.0), 0.11920292202211755, epsilon = 1e-15);
        assert_eq!(logistic(998.0), 1.0);
        assert!(logistic(-998.0) > 0.0 || logistic(-998.0) == 0.0);
        assert!(logistic(-998.0).is_finite());
        assert_relative_eq!(log_logistic(-800.0), -800.0, epsilon = 1e-12);
        assert_relative_eq!(log_logistic(800.0), 0.0, epsilon = 1e-300);
    }

    #[test]
    fn ln_choose_matches_integer_binomials() {
        assert_relative_eq!(ln_choose(10.0, 3.0).exp(), 120.0, max_relative = 1e-12);
        assert_relative_eq!(ln_choose(52.0, 5.0).exp(), 2_598_960.0, max_relative = 1e-11);
        assert_eq!(ln_choose(7.0, 7.0), 0.0);
    }

    #[test]
    fn chi2_quantiles() {
        assert_relative_eq!(chi2_1_quantile(0.95), 3.841458820694124, epsilon = 1e-9);
        assert_relative_eq!(chi2_1_quantile(0.99), 6.634896601021214, epsilon = 1e-8);
        assert_relative_eq!(chi2_1_cdf(chi2_1_quantile(0.9)), 0.9, epsilon = 1e-10);
        assert_relative_eq!(chi2_1_sf(8.13), 0.004354, epsilon = 2e-5);
    }
}
