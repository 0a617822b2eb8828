//! Small numerical optimizers: BFGS with backtracking for the (alpha, beta)
//! layer, Brent's method for the one-dimensional abundance search, and a
//! bracketed Brent root finder for interval endpoints.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Largest infinity-norm step taken in one iteration.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions { grad_tol: 1e-8, max_iter: 500, max_step: 4.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    /// The line search could not make further progress.
    Stalled,
    MaxIter,
    /// The starting point is infeasible.
    Failed,
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    /// Inverse-Hessian approximation (row-major, for the minimization of `-f`).
    pub hinv: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: Status,
}

impl BfgsResult {
    pub fn grad_norm(&self) -> f64 {
        inf_norm(&self.grad)
    }
}

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn identity(d: usize, scale: f64) -> Vec<f64> {
    let mut h = vec![0.0; d * d];
    for i in 0..d {
        h[i * d + i] = scale;
    }
    h
}

const FLAT_LIMIT: usize = 8;

/// Maximizes `f` by BFGS. `f` returns the value and gradient, or `None` at
/// infeasible points, which the line search treats as `-inf`.
pub fn maximize_bfgs<F>(mut f: F, x0: &[f64], hinv0: Option<&[f64]>, opts: BfgsOptions) -> BfgsResult
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let d = x0.len();
    let mut x = x0.to_vec();
    let mut evaluations = 1;
    let Some((mut fx, mut g)) = f(&x).filter(|(v, _)| v.is_finite()) else {
        return BfgsResult {
            x,
            f: f64::NEG_INFINITY,
            grad: vec![f64::NAN; d],
            hinv: identity(d, 1.0),
            iterations: 0,
            evaluations,
            status: Status::Failed,
        };
    };
    let default_scale = |g: &[f64]| 1.0 / inf_norm(g).max(1.0);
    let mut h = match hinv0 {
        Some(h0) if h0.len() == d * d => h0.to_vec(),
        _ => identity(d, default_scale(&g)),
    };
    let mut fresh = hinv0.is_none();
    // consecutive steps that changed f by no more than rounding
    let mut flat = 0;
    let mut dir = vec![0.0; d];
    let mut xt = vec![0.0; d];

    for iter in 0..opts.max_iter {
        let gnorm = inf_norm(&g);
        if gnorm <= opts.grad_tol {
            return BfgsResult { x, f: fx, grad: g, hinv: h, iterations: iter, evaluations, status: Status::Converged };
        }
        for i in 0..d {
            dir[i] = (0..d).map(|j| h[i * d + j] * g[j]).sum();
        }
        let mut slope = dotp(&dir, &g);
        if !(slope > 0.0) {
            h = identity(d, default_scale(&g));
            fresh = true;
            dir.copy_from_slice(&g);
            dir.iter_mut().for_each(|v| *v *= default_scale(&g));
            slope = dotp(&dir, &g);
        }
        let dn = inf_norm(&dir);
        if dn > opts.max_step {
            let s = opts.max_step / dn;
            dir.iter_mut().for_each(|v| *v *= s);
            slope *= s;
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            for i in 0..d {
                xt[i] = x[i] + step * dir[i];
            }
            evaluations += 1;
            if let Some((ft, gt)) = f(&xt).filter(|(v, _)| v.is_finite()) {
                let armijo = ft >= fx + 1e-4 * step * slope;
                let noise = ft >= fx - 8.0 * f64::EPSILON * fx.abs().max(1.0) && inf_norm(&gt) < gnorm;
                if armijo || noise {
                    accepted = Some((ft, gt));
                    break;
                }
                // quadratic interpolation of the decrease, safeguarded
                let denom = 2.0 * (ft - fx - step * slope);
                let next = if denom < 0.0 { -slope * step * step / denom } else { 0.5 * step };
                step = next.clamp(0.1 * step, 0.5 * step);
            } else {
                step *= 0.5;
            }
        }
        let Some((ft, gt)) = accepted else {
            if !fresh {
                h = identity(d, default_scale(&g));
                fresh = true;
                continue;
            }
            return BfgsResult { x, f: fx, grad: g, hinv: h, iterations: iter, evaluations, status: Status::Stalled };
        };

        // BFGS update for the minimization of -f: y = grad(-f)_new - grad(-f)_old.
        let s: Vec<f64> = (0..d).map(|i| xt[i] - x[i]).collect();
        let y: Vec<f64> = (0..d).map(|i| g[i] - gt[i]).collect();
        let sy = dotp(&s, &y);
        if sy > 1e-12 * dotp(&s, &s).sqrt() * dotp(&y, &y).sqrt() {
            if fresh {
                let scale = sy / dotp(&y, &y);
                h = identity(d, scale);
            }
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..d).map(|i| (0..d).map(|j| h[i * d + j] * y[j]).sum()).collect();
            let yhy = dotp(&y, &hy);
            for i in 0..d {
                for j in 0..d {
                    h[i * d + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
            fresh = false;
        }
        if ft - fx <= 4.0 * f64::EPSILON * fx.abs().max(1.0) {
            flat += 1;
        } else {
            flat = 0;
        }
        x.copy_from_slice(&xt);
        fx = ft;
        g = gt;
        if flat >= FLAT_LIMIT {
            let status = if inf_norm(&g) <= opts.grad_tol { Status::Converged } else { Status::Stalled };
            return BfgsResult { x, f: fx, grad: g, hinv: h, iterations: iter + 1, evaluations, status };
        }
    }
    let status = if inf_norm(&g) <= opts.grad_tol { Status::Converged } else { Status::MaxIter };
    BfgsResult { x, f: fx, grad: g, hinv: h, iterations: opts.max_iter, evaluations, status }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarMax {
    pub x: f64,
    pub f: f64,
    pub evaluations: usize,
    /// The maximum sits on the lower end of the search interval.
    pub at_lower: bool,
    /// The maximum sits on the upper end of the search interval.
    pub at_upper: bool,
}

const GOLD: f64 = 1.618_033_988_749_895;
const CGOLD: f64 = 0.381_966_011_250_105;

/// Maximizes `f` on `[lo, hi]` starting from `x0`: a golden-ratio expansion
/// brackets the maximum, then Brent's method (golden section with parabolic
/// steps) refines it to `xtol`.
pub fn maximize_scalar<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, x0: f64, step0: f64, xtol: f64) -> ScalarMax {
    let evals = std::cell::Cell::new(0usize);
    let mut eval = |x: f64| {
        evals.set(evals.get() + 1);
        let v = f(x);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    };
    let done = |mut r: ScalarMax| {
        r.evaluations = evals.get();
        r
    };
    let x0 = x0.clamp(lo, hi);
    let f0 = eval(x0);
    let step0 = step0.abs().max(xtol * 10.0);

    // choose the uphill direction
    let mut dir = 1.0;
    let mut x1 = (x0 + step0).min(hi);
    if x1 == x0 {
        dir = -1.0;
        x1 = (x0 - step0).max(lo);
    }
    let mut f1 = eval(x1);
    if f1 < f0 {
        if dir > 0.0 && x0 > lo {
            let xm = (x0 - step0).max(lo);
            let fm = eval(xm);
            if fm > f0 {
                dir = -1.0;
                x1 = xm;
                f1 = fm;
            } else {
                return done(brent_max(&mut eval, xm, x0, x1, f0, xtol, lo, hi));
            }
        } else if dir > 0.0 {
            if x0 == lo {
                // check whether the lower boundary itself is the maximum
                return done(brent_max(&mut eval, lo, x0, x1, f0, xtol, lo, hi));
            }
        } else {
            return done(brent_max(&mut eval, x1, x0, hi, f0, xtol, lo, hi));
        }
    }

    // expand while uphill
    let (mut xa, mut xb, mut fb) = (x0, x1, f1);
    let mut step = (x1 - x0).abs();
    loop {
        let edge = if dir > 0.0 { hi } else { lo };
        if xb == edge {
            return done(ScalarMax { x: xb, f: fb, evaluations: 0, at_lower: dir < 0.0, at_upper: dir > 0.0 });
        }
        step *= GOLD;
        let xc = if dir > 0.0 { (xb + step).min(hi) } else { (xb - step).max(lo) };
        let fc = eval(xc);
        if fc <= fb {
            let (a, c) = if dir > 0.0 { (xa, xc) } else { (xc, xa) };
            return done(brent_max(&mut eval, a, xb, c, fb, xtol, lo, hi));
        }
        xa = xb;
        xb = xc;
        fb = fc;
    }
}

/// Brent's method on the bracket `a < b < c` with `f(b)` at least as large as
/// at the ends.
#[allow(clippy::too_many_arguments)]
fn brent_max<F: FnMut(f64) -> f64>(
    f: &mut F,
    a: f64,
    b: f64,
    c: f64,
    fb: f64,
    xtol: f64,
    lo: f64,
    hi: f64,
) -> ScalarMax {
    let (mut a, mut c) = (a.min(c), a.max(c));
    let (mut x, mut w, mut v) = (b, b, b);
    let (mut fx, mut fw, mut fv) = (fb, fb, fb);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..200 {
        let xm = 0.5 * (a + c);
        let tol1 = xtol * x.abs().max(1.0);
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (c - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 && fx.is_finite() && fw.is_finite() && fv.is_finite() {
            // parabola through (x,fx), (w,fw), (v,fv); minimize -f
            let r = (x - w) * (fv - fx);
            let q0 = (x - v) * (fw - fx);
            let mut p = (x - v) * q0 - (x - w) * r;
            let mut q = 2.0 * (q0 - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (a - x) && p < q * (c - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || c - u < tol2 {
                    d = tol1.copysign(xm - x);
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { c - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u);
        if fu >= fx {
            if u >= x {
                a = x
            } else {
                c = x
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u
            } else {
                c = u
            }
            if fu >= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu >= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    ScalarMax { x, f: fx, evaluations: 0, at_lower: x <= lo, at_upper: x >= hi }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Root {
    pub x: f64,
    pub fx: f64,
    pub evaluations: usize,
}

/// Brent-Dekker root finding on a sign-changing bracket. Stops when
/// `|f| <= ftol` or the bracket is narrower than `xtol` (relative).
pub fn brent_root<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, fa: f64, fb: f64, xtol: f64, ftol: f64) -> Root {
    let (mut a, mut b, mut fa, mut fb) = (a, b, fa, fb);
    let mut evals = 0;
    if fa.abs() < fb.abs() {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for _ in 0..200 {
        if fb.abs() <= ftol {
            break;
        }
        if (fb > 0.0) == (fc > 0.0) {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 0.5 * xtol * b.abs().max(1.0);
        let xm = 0.5 * (c - b);
        if xm.abs() <= tol1 {
            break;
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * xm * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            }
            p = p.abs();
            let min1 = 3.0 * xm * q - (tol1 * q).abs();
            let min2 = (e * q).abs();
            if 2.0 * p < min1.min(min2) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 { d } else { tol1.copysign(xm) };
        evals += 1;
        fb = f(b);
    }
    Root { x: b, fx: fb, evaluations: evals }
}
