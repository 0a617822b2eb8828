//! Acceptance suite, run without the test harness. Prints one PASS/FAIL line
//! per criterion and exits non-zero if any fails. Each Monte Carlo study
//! has 1000 replications; expect a few minutes on one core.

mod common;

use capture_el::asymptotics::point_derivatives;
use capture_el::el::{solve_lambda, LambdaOptions};
use capture_el::estimator::{fit_complete_case, fit_mele, Estimator, FitOptions};
use capture_el::model::{CaptureDataset, Cell, Family, ModelFamily};
use capture_el::simulation::{run_study, MetricsReport, Scenario, ScenarioConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erf;
use statrs::function::gamma::ln_gamma;

const SEED: u64 = 2024;

struct Check {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn check(id: &'static str, pass: bool, detail: String) -> Check {
    println!("{} [{id}] {detail}", if pass { "PASS" } else { "FAIL" });
    Check { id, pass, detail }
}

fn study(s: Scenario, nu0: usize, levels: Vec<f64>, complete_case: bool, variance: bool) -> MetricsReport {
    let mut cfg = ScenarioConfig::scenario(s, nu0).with_reps(1000).with_seed(SEED).with_levels(levels);
    cfg.complete_case = complete_case;
    cfg.variance = variance;
    run_study(&cfg).expect("study runs")
}

fn within(x: f64, lo: f64, hi: f64) -> bool {
    (lo..=hi).contains(&x)
}

// ---------------------------------------------------------------- oracles

fn dual(rows: &[Vec<f64>], l: &[f64]) -> f64 {
    let mut s = 0.0;
    for r in rows {
        let v = 1.0 + r.iter().zip(l).map(|(a, b)| a * b).sum::<f64>();
        if v <= 0.0 {
            return f64::NEG_INFINITY;
        }
        s += v.ln();
    }
    s
}

fn golden(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..300 {
        let (c, d) = (b - r * (b - a), a + r * (b - a));
        if f(c) > f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    0.5 * (a + b)
}

/// Open interval of `t` with `1 + (l0 + t e)'u > 0` for every row.
fn line_range(rows: &[Vec<f64>], l0: &[f64], axis: usize) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for r in rows {
        let a = 1.0 + r.iter().zip(l0).map(|(x, y)| x * y).sum::<f64>();
        let b = r[axis];
        if b > 0.0 {
            lo = lo.max(-a / b);
        } else if b < 0.0 {
            hi = hi.min(-a / b);
        }
    }
    let pad = 1e-13 * (hi - lo).abs().max(1.0);
    (lo + pad, hi - pad)
}

/// Maximizer of the dual by nested golden-section search.
fn brute_force(rows: &[Vec<f64>]) -> Vec<f64> {
    if rows[0].len() == 1 {
        let (lo, hi) = line_range(rows, &[0.0], 0);
        return vec![golden(|t| dual(rows, &[t]), lo, hi)];
    }
    let inner = |l0: f64| {
        let (lo, hi) = line_range(rows, &[l0, 0.0], 1);
        if !(lo < hi) {
            return (0.0, f64::NEG_INFINITY);
        }
        let l1 = golden(|t| dual(rows, &[l0, t]), lo, hi);
        (l1, dual(rows, &[l0, l1]))
    };
    let mut lo = -1e-3;
    while inner(lo * 2.0).1.is_finite() {
        lo *= 2.0;
    }
    let mut hi = 1e-3;
    while inner(hi * 2.0).1.is_finite() {
        hi *= 2.0;
    }
    let l0 = golden(|t| inner(t).1, 2.0 * lo, 2.0 * hi);
    vec![l0, inner(l0).0]
}

/// Whether 0 is interior to the convex hull of the rows (q = 1 or 2): no
/// closed half-plane through 0 holds every row.
fn origin_inside(rows: &[Vec<f64>]) -> bool {
    if rows[0].len() == 1 {
        return rows.iter().any(|r| r[0] < 0.0) && rows.iter().any(|r| r[0] > 0.0);
    }
    let mut angles: Vec<f64> = rows.iter().map(|r| r[1].atan2(r[0])).collect();
    angles.sort_by(f64::total_cmp);
    let wrap = angles[0] + 2.0 * std::f64::consts::PI - angles[angles.len() - 1];
    let gap = angles.windows(2).map(|w| w[1] - w[0]).fold(wrap, f64::max);
    gap < std::f64::consts::PI - 1e-6
}

fn binom(kk: usize, k: usize) -> f64 {
    (0..k).map(|i| (kk - i) as f64 / (i + 1) as f64).product()
}

fn cell_value(cell: Cell, kk: usize, g: f64, x: Option<u8>) -> f64 {
    let b = |k: usize| binom(kk, k) * g.powi(k as i32) * (1.0 - g).powi((kk - k) as i32);
    match cell {
        Cell::Zero => b(0),
        Cell::Count { k } => b(k),
        Cell::Joint { j, k } => {
            if x == Some(j) {
                b(k)
            } else {
                0.0
            }
        }
    }
}

fn g_of(z: &[f64], beta: &[f64]) -> f64 {
    1.0 / (1.0 + (-z.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>()).exp())
}

fn pi_oracle(z: &[f64], x: Option<u8>, beta: &[f64], fam: &ModelFamily, h: &[f64]) -> f64 {
    let g = g_of(z, beta);
    fam.cells().iter().enumerate().skip(1).map(|(c, &cell)| h[c] * cell_value(cell, fam.occasions(), g, x)).sum()
}

/// Profile log-likelihood of fully observed data at `(nu, alpha0, beta)`,
/// with the scalar multiplier found by bisection.
fn complete_loglik(data: &CaptureDataset, nu: f64, alpha0: f64, beta: &[f64]) -> f64 {
    let kk = data.occasions() as f64;
    let n = data.n() as f64;
    let mut u = Vec::new();
    let mut binom_ll = 0.0;
    for r in data.records() {
        let g = g_of(r.covariates.as_ref().unwrap(), beta);
        let d = r.captures as f64;
        binom_ll += d * g.ln() + (kk - d) * (1.0 - g).ln();
        u.push((1.0 - g).powf(kk) - alpha0);
    }
    let umax = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let umin = u.iter().cloned().fold(f64::INFINITY, f64::min);
    let score = |l: f64| u.iter().map(|v| v / (1.0 + l * v)).sum::<f64>();
    let (mut a, mut b) = (-1.0 / umax, -1.0 / umin);
    for _ in 0..400 {
        let mid = 0.5 * (a + b);
        if score(mid) > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    let l = 0.5 * (a + b);
    let ln_choose = ln_gamma(nu + 1.0) - ln_gamma(n + 1.0) - ln_gamma(nu - n + 1.0);
    let zero = if nu > n { (nu - n) * alpha0.ln() } else { 0.0 };
    ln_choose + zero + binom_ll - u.iter().map(|v| (1.0 + l * v).ln()).sum::<f64>()
}

fn ks_distance(sample: &[f64]) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let nf = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = erf((x.max(0.0) / 2.0).sqrt());
            ((i + 1) as f64 / nf - f).max(f - i as f64 / nf)
        })
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------- criteria

fn lambda_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut failed = 0;
    let mut instances = 0;
    while instances < 100 {
        let m = rng.random_range(3..=10);
        let q = rng.random_range(1..=2);
        let shift: Vec<f64> = (0..q).map(|_| rng.random_range(-0.5..0.5)).collect();
        let rows: Vec<Vec<f64>> =
            (0..m).map(|_| (0..q).map(|j| rng.random_range(-1.0..1.0) + shift[j]).collect()).collect();
        if !origin_inside(&rows) {
            continue;
        }
        instances += 1;
        let u = DMatrix::from_fn(m, q, |i, j| rows[i][j]);
        let s = solve_lambda(&u, LambdaOptions::default()).unwrap();
        if !s.converged {
            failed += 1;
            continue;
        }
        for (a, b) in s.lambda.iter().zip(brute_force(&rows)) {
            worst = worst.max((a - b).abs() / (1.0 + b.abs()));
        }
    }
    check(
        "6",
        failed == 0 && worst <= 1e-6,
        format!("multiplier vs golden-section dual maximum on 100 instances: worst scaled error {worst:.2e}, {failed} unsolved"),
    )
}

fn invariants() -> Check {
    let opts = FitOptions::default();
    let mut bad = Vec::new();
    let mut worst = [0.0f64; 6];
    let corpus = common::corpus();
    for (name, data, fam) in &corpus {
        let mut est = Estimator::new(data, *fam, opts).unwrap();
        let fit = est.fit().unwrap().clone();
        let sum = (fit.weights.iter().sum::<f64>() - 1.0).abs();
        let u = est.objective().constraint_matrix(&fit.alpha_hat, &fit.beta_hat, &fit.lambda_columns);
        let mean = (0..u.ncols())
            .map(|a| fit.weights.iter().enumerate().map(|(i, p)| p * u[(i, a)]).sum::<f64>().abs())
            .fold(0.0, f64::max);
        let r = est.ratio_profile(fit.nu_hat).unwrap();
        let ci = est.confidence_interval(0.95).unwrap();

        let moved = data
            .map_covariates(|z| {
                let mut v = z.to_vec();
                let last = v.len() - 1;
                v[last] = 3.0 + 2.0 * v[last];
                v
            })
            .unwrap();
        let mv = fit_mele(&moved, *fam, &opts).unwrap();
        let affine = (mv.nu_hat - fit.nu_hat).abs().max((mv.loglik - fit.loglik).abs());

        let cc = data.complete_cases();
        let full = fit_mele(&cc, *fam, &opts).unwrap();
        let base = fit_complete_case(data, *fam, &opts).unwrap();
        let oracle = complete_loglik(&cc, full.nu_hat, full.alpha_hat[0], &full.beta_hat);
        let reduction = (full.nu_hat - base.nu_hat).abs().max((full.loglik - oracle).abs());

        let vals = [sum, mean, r, (data.n() as f64 - ci.lower).max(0.0), affine, reduction];
        let tols = [1e-10, 1e-8, 1e-6, 0.0, 1e-6, 1e-6];
        for (k, (v, t)) in vals.iter().zip(tols).enumerate() {
            worst[k] = worst[k].max(*v);
            if !(*v <= t) || !fit.converged() {
                bad.push(format!("{name}#{k}={v:.1e}"));
            }
        }
    }
    check(
        "7",
        bad.is_empty(),
        format!(
            "{} datasets: |sum p - 1| {:.1e}, |sum pU| {:.1e}, R'(nu_hat) {:.1e}, lower below n by {:.1e}, affine {:.1e}, complete-data {:.1e}{}",
            corpus.len(),
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            worst[4],
            worst[5],
            if bad.is_empty() { String::new() } else { format!("; failing: {}", bad.join(" ")) }
        ),
    )
}

fn derivatives() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-6);
    for point in 0..10 {
        let extended = point % 2 == 1;
        let kk = rng.random_range(2..=17);
        let fam = ModelFamily::new(if extended { Family::Extended } else { Family::Base }, kk, 3).unwrap();
        let h: Vec<f64> = (0..fam.n_cells()).map(|_| rng.random_range(0.2..1.0)).collect();
        let z = vec![1.0, if rng.random_bool(0.5) { 1.0 } else { 0.0 }, rng.random_range(0.0..3.0)];
        let x = extended.then_some(z[1] as u8);
        let beta: Vec<f64> = vec![rng.random_range(-2.5..0.5), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let d = point_derivatives(&z, x, &beta, &fam, &h);
        let shifted = |moves: &[(usize, f64)]| {
            let mut b = beta.clone();
            for &(j, t) in moves {
                b[j] += t;
            }
            b
        };
        let pi = |b: &[f64]| pi_oracle(&z, x, b, &fam, &h);
        for j in 0..3 {
            let e = 1e-5;
            let fd = (pi(&shifted(&[(j, e)])) - pi(&shifted(&[(j, -e)]))) / (2.0 * e);
            worst = worst.max(rel(d.pi_dot[j], fd));
            for l in 0..3 {
                // Richardson-extrapolated central second difference
                let second = |e: f64| {
                    (pi(&shifted(&[(j, e), (l, e)])) - pi(&shifted(&[(j, e), (l, -e)]))
                        - pi(&shifted(&[(j, -e), (l, e)]))
                        + pi(&shifted(&[(j, -e), (l, -e)])))
                        / (4.0 * e * e)
                };
                let fd2 = (4.0 * second(1e-3) - second(2e-3)) / 3.0;
                worst = worst.max(rel(d.pi_ddot[(j, l)], fd2));
            }
            for (c, &cell) in fam.cells().iter().enumerate() {
                let b = |bb: &[f64]| cell_value(cell, kk, g_of(&z, bb), x);
                let fd3 = (b(&shifted(&[(j, e)])) - b(&shifted(&[(j, -e)]))) / (2.0 * e);
                worst = worst.max(rel(d.du_dbeta[(j, c)], fd3));
            }
        }
    }
    check("8", worst <= 1e-5, format!("pi', pi'' and dU/dbeta vs central differences at 10 points: worst relative {worst:.1e}"))
}

fn field_report() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let labeled = common::field_like(1);
    let missing = labeled.missing_fraction();
    let csv = common::write_dataset(dir.path(), "field.csv", &labeled);
    let csv = csv.to_str().unwrap();
    let (fit_out, test_out) = (dir.path().join("fit.json"), dir.path().join("test.json"));
    let base = ["--data", csv, "--k", "17", "--model", "extended", "--always-observed", "x", "-q"];
    let fit = common::run(&[&["fit"], &base[..], &["--complete-case", "--wald", "--out", fit_out.to_str().unwrap()]].concat());
    let test = common::run(&[&["test"], &base[..], &["--out", test_out.to_str().unwrap()]].concat());
    let ok = fit.status.code() == Some(0) && test.status.code() == Some(0);
    let detail = if ok {
        let f = common::read_json(&fit_out);
        let t = common::read_json(&test_out);
        let shaped = f["n"] == 163
            && f["ci"]["lower"].is_number()
            && f["complete_case"]["nu_hat"].is_number()
            && f["wald"]["upper"].is_number()
            && t["test"]["statistic"].is_number();
        (
            shaped,
            format!(
                "K=17, n=163, {:.0}% missing: nu_hat {:.1}, CI [{:.0}, {:.0}], CC {:.1}, test of beta_x: {:.2} (p = {:.3})",
                100.0 * missing,
                f["nu_hat"].as_f64().unwrap_or(f64::NAN),
                f["ci"]["lower"].as_f64().unwrap_or(f64::NAN),
                f["ci"]["upper"].as_f64().unwrap_or(f64::NAN),
                f["complete_case"]["nu_hat"].as_f64().unwrap_or(f64::NAN),
                t["test"]["statistic"].as_f64().unwrap_or(f64::NAN),
                t["test"]["p_value"].as_f64().unwrap_or(f64::NAN),
            ),
        )
    } else {
        (false, format!("exit codes {:?} / {:?}: {}", fit.status.code(), test.status.code(), String::from_utf8_lossy(&fit.stderr)))
    };
    check("field", ok && detail.0, format!("fit + test on a field-like dataset: {}", detail.1))
}

fn main() {
    let mut checks = Vec::new();

    let b200 = study(Scenario::B, 200, vec![0.95], true, false);
    let p = &b200.proposed;
    checks.push(check(
        "1",
        within(p.bias, 0.08 - 1.5, 0.08 + 1.5) && within(p.rmse, 0.40, 0.90),
        format!("B nu0=200: bias {:.2} (se {:.2}), RMSE {:.3}; {} reps, {} failed", p.bias, p.bias_se, p.rmse, b200.replications, b200.failures),
    ));

    let a400 = study(Scenario::A, 400, vec![], false, false);
    let p = &a400.proposed;
    checks.push(check(
        "2",
        within(p.bias, 6.0, 26.0) && within(p.rmse, 0.6 * 16.56, 1.4 * 16.56),
        format!("A nu0=400: bias {:.2} (se {:.2}), RMSE {:.2}; {} reps, {} failed", p.bias, p.bias_se, p.rmse, a400.replications, a400.failures),
    ));

    let cc = b200.complete_case.as_ref().expect("complete-case metrics");
    checks.push(check("3", within(cc.bias, -75.0, -50.0), format!("B nu0=200 complete-case bias {:.2}", cc.bias)));

    let l = &b200.levels[0];
    checks.push(check(
        "4",
        (l.two_sided.rate - 0.9474).abs() <= 0.02 && (l.lower_limit.rate - 0.9422).abs() <= 0.02,
        format!("B nu0=200 95% coverage: two-sided {:.2}%, lower limit {:.2}%", 100.0 * l.two_sided.rate, 100.0 * l.lower_limit.rate),
    ));

    let d400 = study(Scenario::D, 400, vec![], false, false);
    let ks = ks_distance(&d400.r_prime_nu0);
    checks.push(check("5", ks <= 0.05, format!("D nu0=400: KS distance of R'(nu0) from chi2(1) {ks:.4} over {} reps", d400.r_prime_nu0.len())));

    checks.push(lambda_oracle());
    checks.push(invariants());
    checks.push(derivatives());

    let b400 = study(Scenario::B, 400, vec![], false, true);
    let v = b400.variance.as_ref().expect("variance check");
    checks.push(check(
        "9",
        (v.ratio - 1.0).abs() <= 0.15,
        format!("B nu0=400: empirical variance {:.4} vs mean W^-1[1,1] {:.4} (ratio {:.3})", v.empirical, v.mean_w_inv_11, v.ratio),
    ));

    checks.push(field_report());

    let failed: Vec<String> = checks.iter().filter(|c| !c.pass).map(|c| format!("[{}] {}", c.id, c.detail)).collect();
    println!("acceptance: {} of {} criteria pass", checks.len() - failed.len(), checks.len());
    if !failed.is_empty() {
        eprintln!("failed criteria:\n{}", failed.join("\n"));
        std::process::exit(1);
    }
}
