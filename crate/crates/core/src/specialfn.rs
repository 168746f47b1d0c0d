//! Special-function kernels used by the accountants.
//!
//! Everything here is a pure function of its arguments. The incomplete beta
//! and incomplete gamma functions are evaluated with the usual series /
//! continued-fraction split; quantiles are found by a geometrically grown
//! bracket, bisection, and a safeguarded Newton finish.

use crate::error::{domain, Error, Result};
use std::f64::consts::{PI, SQRT_2};

/// Root-finding controls for the quantile solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileOptions {
    /// Cap on bisection + Newton iterations.
    pub max_iter: usize,
    /// Relative width at which bisection hands over to Newton.
    pub bisect_rel_tol: f64,
}

impl Default for QuantileOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            bisect_rel_tol: 1e-6,
        }
    }
}

const CF_MAX_ITER: usize = 200_000;
const CF_EPS: f64 = 1e-16;
const TINY: f64 = 1e-300;

/// Natural log of the gamma function for z > 0.
pub fn log_gamma(z: f64) -> Result<f64> {
    if !(z > 0.0) || !z.is_finite() {
        return domain(format!("log_gamma requires a finite z > 0, got {z}"));
    }
    Ok(libm::lgamma(z))
}

fn ln_beta(a: f64, b: f64) -> f64 {
    libm::lgamma(a) + libm::lgamma(b) - libm::lgamma(a + b)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return domain(format!("normal_cdf requires a finite argument, got {x}"));
    }
    Ok(phi(x))
}

/// Unchecked standard normal CDF; accepts ±∞.
pub(crate) fn phi(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    if x == f64::INFINITY {
        return 1.0;
    }
    0.5 * libm::erfc(-x / SQRT_2)
}

pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal quantile (Wichura's AS 241 followed by one Newton step).
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return domain(format!("normal_quantile requires 0 < p < 1, got {p}"));
    }
    let x = as241(p);
    // one Newton correction against the erfc-based CDF, done on the smaller tail
    let (err, sign) = if p < 0.5 {
        (phi(x) - p, 1.0)
    } else {
        (phi(-x) - (1.0 - p), -1.0)
    };
    let pdf = normal_pdf(x);
    if pdf > 0.0 {
        Ok(x - sign * err / pdf)
    } else {
        Ok(x)
    }
}

fn as241(p: f64) -> f64 {
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = (((((((2509.0809287301226727 * r + 33430.575583588128105) * r
            + 67265.770927008700853)
            * r
            + 45921.953931549871457)
            * r
            + 13731.693765509461125)
            * r
            + 1971.5909503065514427)
            * r
            + 133.14166789178437745)
            * r)
            + 3.387132872796366608;
        let den = (((((((5226.495278852545925 * r + 28729.085735721942674) * r
            + 39307.89580009271061)
            * r
            + 21213.794301586595867)
            * r
            + 5394.1960214247511077)
            * r
            + 687.1870074920579083)
            * r
            + 42.313330701600911252)
            * r)
            + 1.0;
        return q * num / den;
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r
            + 0.24178072517745061177)
            * r
            + 1.27045825245236838258)
            * r
            + 3.64784832476320460504)
            * r
            + 5.7694972214606914055)
            * r
            + 4.6303378461565452959)
            * r
            + 1.42343711074968357734;
        let den = ((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r
            + 0.0151986665636164571966)
            * r
            + 0.14810397642748007459)
            * r
            + 0.68976733498510000455)
            * r
            + 1.6763848301838038494)
            * r
            + 2.05319162663775882187)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
            + 0.0012426609473880784386)
            * r
            + 0.026532189526576123093)
            * r
            + 0.29656057182850489123)
            * r
            + 1.7848265399172913358)
            * r
            + 5.4637849111641143699)
            * r
            + 6.6579046435011037772;
        let den = ((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r
            + 1.8463183175100546818e-5)
            * r
            + 7.868691311456132591e-4)
            * r
            + 0.0148753612908506148525)
            * r
            + 0.13692988092273580531)
            * r
            + 0.59983220655588793769)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

// ---------------------------------------------------------------------------
// Incomplete beta

/// Modified-Lentz evaluation of the incomplete beta continued fraction.
fn beta_cf(a: f64, b: f64, x: f64) -> Result<f64> {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() <= CF_EPS {
            return Ok(h);
        }
    }
    Err(Error::Convergence(format!(
        "incomplete beta continued fraction did not converge (a = {a}, b = {b}, x = {x})"
    )))
}

fn check_beta_args(x: f64, a: f64, b: f64) -> Result<()> {
    if !(a > 0.0 && a.is_finite()) || !(b > 0.0 && b.is_finite()) {
        return domain(format!("beta parameters must be positive and finite, got a = {a}, b = {b}"));
    }
    if !(0.0..=1.0).contains(&x) {
        return domain(format!("reg_inc_beta requires 0 <= x <= 1, got {x}"));
    }
    Ok(())
}

/// Lower and upper regularized incomplete beta `(I_x(a,b), 1 - I_x(a,b))`,
/// where the caller supplies `y = 1 - x` computed without cancellation.
fn inc_beta_pair(x: f64, y: f64, a: f64, b: f64) -> Result<(f64, f64)> {
    if x <= 0.0 {
        return Ok((0.0, 1.0));
    }
    if y <= 0.0 {
        return Ok((1.0, 0.0));
    }
    let ln_front = a * x.ln() + b * y.ln() - ln_beta(a, b);
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        let lower = (front * beta_cf(a, b, x)? / a).clamp(0.0, 1.0);
        Ok((lower, 1.0 - lower))
    } else {
        let upper = (front * beta_cf(b, a, y)? / b).clamp(0.0, 1.0);
        Ok((1.0 - upper, upper))
    }
}

/// Regularized incomplete beta `I_x(a, b)`, the Beta(a, b) CDF at `x`.
pub fn reg_inc_beta(x: f64, a: f64, b: f64) -> Result<f64> {
    check_beta_args(x, a, b)?;
    Ok(inc_beta_pair(x, 1.0 - x, a, b)?.0)
}

/// Beta(a, b) survival `1 - I_x(a, b)`, evaluated without cancellation.
pub fn beta_sf(x: f64, a: f64, b: f64) -> Result<f64> {
    check_beta_args(x, a, b)?;
    Ok(inc_beta_pair(x, 1.0 - x, a, b)?.1)
}

// ---------------------------------------------------------------------------
// Incomplete gamma

/// Regularized lower and upper incomplete gamma `(P(a, x), Q(a, x))`.
pub fn reg_inc_gamma(a: f64, x: f64) -> Result<(f64, f64)> {
    if !(a > 0.0 && a.is_finite()) {
        return domain(format!("incomplete gamma requires a > 0, got {a}"));
    }
    if !(x >= 0.0) {
        return domain(format!("incomplete gamma requires x >= 0, got {x}"));
    }
    if x == 0.0 {
        return Ok((0.0, 1.0));
    }
    if x == f64::INFINITY {
        return Ok((1.0, 0.0));
    }
    let ln_front = -x + a * x.ln() - libm::lgamma(a);
    if x < a + 1.0 {
        // series for P
        let mut ap = a;
        let mut del = 1.0 / a;
        let mut sum = del;
        for _ in 0..CF_MAX_ITER {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * CF_EPS {
                let p = (sum * ln_front.exp()).clamp(0.0, 1.0);
                return Ok((p, 1.0 - p));
            }
        }
        Err(Error::Convergence(format!(
            "incomplete gamma series did not converge (a = {a}, x = {x})"
        )))
    } else {
        // continued fraction for Q
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..=CF_MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() <= CF_EPS {
                let q = (ln_front.exp() * h).clamp(0.0, 1.0);
                return Ok((1.0 - q, q));
            }
        }
        Err(Error::Convergence(format!(
            "incomplete gamma continued fraction did not converge (a = {a}, x = {x})"
        )))
    }
}

// ---------------------------------------------------------------------------
// Student-t

fn check_dof(nu: f64) -> Result<()> {
    if !(nu > 0.0 && nu.is_finite()) {
        return domain(format!("degrees of freedom must be positive and finite, got {nu}"));
    }
    Ok(())
}

/// Upper tail `P(T_ν > u)` for u >= 0.
fn student_t_upper(nu: f64, u: f64) -> Result<f64> {
    if u == 0.0 {
        return Ok(0.5);
    }
    let t2 = u * u;
    let x = nu / (nu + t2);
    let y = t2 / (nu + t2);
    let (lower, _) = inc_beta_pair(x, y, nu / 2.0, 0.5)?;
    Ok(0.5 * lower)
}

/// Student-t CDF with ν degrees of freedom.
pub fn student_t_cdf(nu: f64, t: f64) -> Result<f64> {
    check_dof(nu)?;
    if t.is_nan() {
        return domain("student_t_cdf argument is NaN");
    }
    if t.is_infinite() {
        return Ok(if t > 0.0 { 1.0 } else { 0.0 });
    }
    let upper = student_t_upper(nu, t.abs())?;
    Ok(if t < 0.0 { upper } else { 1.0 - upper })
}

fn student_t_pdf(nu: f64, t: f64) -> f64 {
    let ln = libm::lgamma((nu + 1.0) / 2.0)
        - libm::lgamma(nu / 2.0)
        - 0.5 * (nu * PI).ln()
        - (nu + 1.0) / 2.0 * (t * t / nu).ln_1p();
    ln.exp()
}

/// Student-t quantile `t_ν(p)`.
pub fn student_t_quantile(nu: f64, p: f64) -> Result<f64> {
    student_t_quantile_with(nu, p, QuantileOptions::default())
}

pub fn student_t_quantile_with(nu: f64, p: f64, opts: QuantileOptions) -> Result<f64> {
    check_dof(nu)?;
    if !(p > 0.0 && p < 1.0) {
        return domain(format!("student_t_quantile requires 0 < p < 1, got {p}"));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    // Solve P(T > u) = tail on the upper half line; the sign is restored at the end.
    let (tail, sign) = if p < 0.5 { (p, -1.0) } else { (1.0 - p, 1.0) };
    let guess = normal_quantile(1.0 - tail)?.abs().max(1e-3);
    let u = solve_decreasing(
        |u| Ok(student_t_upper(nu, u)? - tail),
        |u| -student_t_pdf(nu, u),
        guess,
        opts,
        "student_t_quantile",
    )?;
    Ok(sign * u)
}

// ---------------------------------------------------------------------------
// Chi-square

/// χ²_ν CDF.
pub fn chi2_cdf(nu: f64, x: f64) -> Result<f64> {
    check_dof(nu)?;
    if x <= 0.0 {
        return Ok(0.0);
    }
    Ok(reg_inc_gamma(nu / 2.0, x / 2.0)?.0)
}

/// χ²_ν survival function.
pub fn chi2_sf(nu: f64, x: f64) -> Result<f64> {
    check_dof(nu)?;
    if x <= 0.0 {
        return Ok(1.0);
    }
    Ok(reg_inc_gamma(nu / 2.0, x / 2.0)?.1)
}

fn chi2_pdf(nu: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let k = nu / 2.0;
    ((k - 1.0) * x.ln() - x / 2.0 - k * std::f64::consts::LN_2 - libm::lgamma(k)).exp()
}

/// χ²_ν quantile `κ_ν(p)`.
pub fn chi2_quantile(nu: f64, p: f64) -> Result<f64> {
    chi2_quantile_with(nu, p, QuantileOptions::default())
}

pub fn chi2_quantile_with(nu: f64, p: f64, opts: QuantileOptions) -> Result<f64> {
    check_dof(nu)?;
    if !(p > 0.0 && p < 1.0) {
        return domain(format!("chi2_quantile requires 0 < p < 1, got {p}"));
    }
    // Wilson-Hilferty starting point
    let z = normal_quantile(p)?;
    let h = 2.0 / (9.0 * nu);
    let wh = nu * (1.0 - h + z * h.sqrt()).powi(3);
    let guess = if wh > 0.0 { wh } else { nu * 1e-3 };
    if p <= 0.5 {
        // P(χ² ≤ x) - p is increasing; negate to reuse the decreasing solver
        solve_decreasing(
            |x| Ok(p - chi2_cdf(nu, x)?),
            |x| -chi2_pdf(nu, x),
            guess,
            opts,
            "chi2_quantile",
        )
    } else {
        let q = 1.0 - p;
        solve_decreasing(
            |x| Ok(chi2_sf(nu, x)? - q),
            |x| -chi2_pdf(nu, x),
            guess,
            opts,
            "chi2_quantile",
        )
    }
}

/// Finds the root of a decreasing function `g` on (0, ∞).
///
/// The bracket is grown geometrically around `guess`, narrowed by bisection in
/// log space to `opts.bisect_rel_tol`, then polished with Newton steps that are
/// rejected whenever they leave the bracket.
fn solve_decreasing<G, D>(
    g: G,
    dg: D,
    guess: f64,
    opts: QuantileOptions,
    what: &str,
) -> Result<f64>
where
    G: Fn(f64) -> Result<f64>,
    D: Fn(f64) -> f64,
{
    let mut lo = guess;
    let mut hi = guess;
    let mut expansions = 0;
    while g(lo)? < 0.0 {
        lo *= 0.5;
        expansions += 1;
        if lo < f64::MIN_POSITIVE || expansions > 2200 {
            return Err(Error::Convergence(format!("{what}: could not bracket the root from below")));
        }
    }
    while g(hi)? > 0.0 {
        hi *= 2.0;
        expansions += 1;
        if !hi.is_finite() || expansions > 2200 {
            return Err(Error::Convergence(format!("{what}: could not bracket the root from above")));
        }
    }
    if lo == hi {
        // the guess was already a root on both sides
        return Ok(lo);
    }

    let mut iter = 0;
    while hi - lo > opts.bisect_rel_tol * hi {
        iter += 1;
        if iter > opts.max_iter {
            return Err(Error::Convergence(format!(
                "{what}: bisection exceeded {} iterations",
                opts.max_iter
            )));
        }
        let mid = if lo > 0.0 && hi / lo > 4.0 {
            (lo * hi).sqrt()
        } else {
            0.5 * (lo + hi)
        };
        if g(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }

    let mut x = 0.5 * (lo + hi);
    loop {
        iter += 1;
        if iter > opts.max_iter {
            return Err(Error::Convergence(format!(
                "{what}: Newton refinement exceeded {} iterations",
                opts.max_iter
            )));
        }
        let gx = g(x)?;
        if gx == 0.0 {
            return Ok(x);
        }
        if gx > 0.0 {
            lo = lo.max(x);
        } else {
            hi = hi.min(x);
        }
        let slope = dg(x);
        let mut next = if slope < 0.0 && slope.is_finite() {
            x - gx / slope
        } else {
            f64::NAN
        };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 4.0 * f64::EPSILON * x.abs() || hi - lo <= 4.0 * f64::EPSILON * hi {
            return Ok(next);
        }
        x = next;
    }
}
