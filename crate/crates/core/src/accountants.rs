//! Closed-form privacy accounting: minimum alignment, the vector theorem, the
//! small-rank and large-rank matrix bounds, tail bounds, composition and the
//! α chooser.
//!
//! The small-rank bound is `δ_total = δ_E(ε, α) + δ_M`, reconstructed from the
//! final display of its proof since no standalone statement is given.

use crate::error::{domain, Error, Result};
use crate::profiler::{delta_support, DEFAULT_SAMPLES};
use crate::randmat::{Seed, Vector};
use crate::specialfn::{beta_sf, chi2_quantile, phi, student_t_quantile};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Stable JSON envelope shared by all reports.
pub trait JsonReport {
    fn kind(&self) -> &'static str;
    fn inputs(&self) -> Value;
    fn intermediates(&self) -> Value;
    fn epsilon(&self) -> f64;
    fn delta(&self) -> f64;

    fn to_json(&self) -> Value {
        json!({
            "kind": self.kind(),
            "inputs": self.inputs(),
            "intermediates": self.intermediates(),
            "epsilon": self.epsilon(),
            "delta": self.delta(),
        })
    }
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

fn check_prob_open(name: &str, p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return domain(format!("{name} must lie in (0, 1), got {p}"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSpec {
    pub rho: f64,
    pub d: usize,
    pub r: usize,
}

impl AlignmentSpec {
    pub fn new(rho: f64, d: usize, r: usize) -> Result<Self> {
        if !(rho.abs() <= 1.0) {
            return domain(format!("rho must lie in [-1, 1], got {rho}"));
        }
        if d < 2 {
            return domain(format!("d must be at least 2, got {d}"));
        }
        if r == 0 {
            return domain("r must be positive");
        }
        Ok(Self { rho, d, r })
    }
}

/// Smallest inner product over declared neighbor pairs, after renormalizing.
pub fn min_alignment(pairs: &[(Vector, Vector)]) -> Result<f64> {
    if pairs.is_empty() {
        return domain("no neighbor pairs given");
    }
    let mut best = f64::INFINITY;
    for (a, b) in pairs {
        if a.len() != b.len() {
            return Err(Error::Shape(format!("pair lengths differ: {} vs {}", a.len(), b.len())));
        }
        let (na, nb) = (a.norm(), b.norm());
        if (na - 1.0).abs() > 1e-8 || (nb - 1.0).abs() > 1e-8 {
            return domain(format!("neighbor outputs must be unit vectors, got norms {na} and {nb}"));
        }
        best = best.min((a.dot(b) / (na * nb)).clamp(-1.0, 1.0));
    }
    Ok(best)
}

/// `max(−1, 1 − 8L²/(c₀² n²))` for mean-of-bounded-vectors queries.
pub fn alignment_lower_bound(l: f64, c0: f64, n: usize) -> Result<f64> {
    if !(c0 > 0.0) {
        return domain(format!("c0 must be positive, got {c0}"));
    }
    if n == 0 {
        return domain("n must be at least 1");
    }
    if !(l >= 0.0) {
        return domain(format!("L must be nonnegative, got {l}"));
    }
    let n = n as f64;
    Ok((1.0 - 8.0 * l * l / (c0 * c0 * n * n)).max(-1.0))
}

/// Monte Carlo settings for the support-failure term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportMc {
    pub n: usize,
    pub seed: Seed,
}

impl Default for SupportMc {
    fn default() -> Self {
        Self {
            n: DEFAULT_SAMPLES,
            seed: Seed::new(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VecAccountReport {
    pub rho: f64,
    pub d: usize,
    pub r: usize,
    pub delta_prime: f64,
    /// `t_r(1 − δ′)`
    pub t_quantile: f64,
    /// Admissibility threshold `t/√(r + t²)`.
    pub threshold: f64,
    pub k: f64,
    pub a_minus: f64,
    pub a_plus: f64,
    /// `κ_{d+r−1}(1 − δ′)`
    pub b: f64,
    pub delta_support: f64,
    pub delta_support_stderr: f64,
    pub delta_rho: f64,
    pub delta_rho_unclamped: f64,
    pub eps_rho: f64,
    pub support_mc: SupportMc,
}

impl VecAccountReport {
    /// Re-evaluates ε from the stored intermediates.
    pub fn eps_from_intermediates(&self) -> f64 {
        if self.k == 0.0 && self.rho == 1.0 {
            return 0.0;
        }
        0.5 * (self.d as f64 - self.r as f64 + 1.0) * self.a_plus.ln()
            + (1.0 - self.rho + self.k) * self.b / (2.0 * self.a_minus)
    }
}

impl JsonReport for VecAccountReport {
    fn kind(&self) -> &'static str {
        "account_vec"
    }
    fn inputs(&self) -> Value {
        json!({"rho": self.rho, "d": self.d, "r": self.r, "delta_prime": self.delta_prime,
               "support_samples": self.support_mc.n, "seed": self.support_mc.seed})
    }
    fn intermediates(&self) -> Value {
        json!({"t_quantile": self.t_quantile, "threshold": self.threshold, "K": self.k,
               "a_minus": self.a_minus, "a_plus": self.a_plus, "b": self.b,
               "delta_support": self.delta_support, "delta_support_stderr": self.delta_support_stderr,
               "delta_rho_unclamped": self.delta_rho_unclamped})
    }
    fn epsilon(&self) -> f64 {
        self.eps_rho
    }
    fn delta(&self) -> f64 {
        self.delta_rho
    }
}

/// Admissibility threshold `t_r(1−δ′)/√(r + t_r(1−δ′)²)` on ρ.
pub fn vec_threshold(r: usize, delta_prime: f64) -> Result<f64> {
    check_prob_open("delta'", delta_prime)?;
    let t = student_t_quantile(r as f64, 1.0 - delta_prime)?;
    Ok(t / (r as f64 + t * t).sqrt())
}

/// `(ε_ρ, δ_ρ)` of the rank-r projection mechanism on unit vector queries with
/// minimum alignment ρ.
pub fn account_vec(spec: &AlignmentSpec, delta_prime: f64, support: SupportMc) -> Result<VecAccountReport> {
    let AlignmentSpec { rho, d, r } = *spec;
    if !(rho > 0.0) {
        return domain(format!("minimum alignment must be positive, got {rho}"));
    }
    check_prob_open("delta'", delta_prime)?;
    let t = student_t_quantile(r as f64, 1.0 - delta_prime)?;
    let threshold = t / (r as f64 + t * t).sqrt();
    if !(rho > threshold) {
        return Err(Error::InadmissibleAlignment {
            rho,
            threshold,
            r,
            delta_prime,
        });
    }
    let k = ((1.0 - rho * rho).max(0.0) / r as f64).sqrt() * t;
    let b = chi2_quantile((d + r - 1) as f64, 1.0 - delta_prime)?;
    let (a_minus, a_plus) = (rho - k, rho + k);
    let eps_rho = if k == 0.0 && rho == 1.0 {
        0.0
    } else {
        0.5 * (d as f64 - r as f64 + 1.0) * a_plus.ln() + (1.0 - rho + k) * b / (2.0 * a_minus)
    };
    let (ds, ds_err) = delta_support(rho, r, support.n, support.seed)?;
    let unclamped = ds + 3.0 * delta_prime;
    Ok(VecAccountReport {
        rho,
        d,
        r,
        delta_prime,
        t_quantile: t,
        threshold,
        k,
        a_minus,
        a_plus,
        b,
        delta_support: ds,
        delta_support_stderr: ds_err,
        delta_rho: clamp01(unclamped),
        delta_rho_unclamped: unclamped,
        eps_rho,
        support_mc: support,
    })
}

/// `T(ε; μ) = Φ((−ε−μ/2)/√μ) + 1 − Φ((ε−μ/2)/√μ)`, with `T(ε; 0) = 0`.
pub fn gaussian_tradeoff(eps: f64, mu: f64) -> f64 {
    if !(mu > 0.0) {
        return 0.0;
    }
    let sm = mu.sqrt();
    let lower = phi((-eps - 0.5 * mu) / sm);
    let upper = phi(-(eps - 0.5 * mu) / sm);
    clamp01(lower + upper)
}

/// `min(1, s·(1 − I_α(r/2, (d−r)/2)))`.
pub fn delta_m_bound(s: usize, alpha: f64, r: usize, d: usize) -> Result<f64> {
    if s == 0 {
        return domain("rank s of the difference must be at least 1");
    }
    if r == 0 || r >= d {
        return domain(format!("need 1 <= r <= d - 1, got r = {r}, d = {d}"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return domain(format!("alpha must lie in (0, 1], got {alpha}"));
    }
    let tail = beta_sf(alpha, 0.5 * r as f64, 0.5 * (d - r) as f64)?;
    Ok((s as f64 * tail).min(1.0))
}

/// `min(1, 2 exp(−η² r / 72))`.
pub fn beta_tail_bound(eta: f64, r: usize) -> Result<f64> {
    if !(eta > 0.0 && eta < 1.0) {
        return domain(format!("eta must lie in (0, 1), got {eta}"));
    }
    Ok((2.0 * (-eta * eta * r as f64 / 72.0).exp()).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallRReport {
    pub eps: f64,
    pub sens_frob: f64,
    pub s: usize,
    pub d: usize,
    pub r: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub mu_bar: f64,
    pub delta_e: f64,
    pub delta_m: f64,
    pub delta_total: f64,
    pub delta_total_unclamped: f64,
    /// Set when `T(ε; ·)` was found non-monotone below `μ̄` and the grid maximum was used.
    pub monotone_safeguard: bool,
}

impl JsonReport for SmallRReport {
    fn kind(&self) -> &'static str {
        "account_small_r"
    }
    fn inputs(&self) -> Value {
        json!({"eps": self.eps, "sens_frob": self.sens_frob, "s": self.s, "d": self.d,
               "r": self.r, "sigma": self.sigma, "alpha": self.alpha})
    }
    fn intermediates(&self) -> Value {
        json!({"mu_bar": self.mu_bar, "delta_E": self.delta_e, "delta_M": self.delta_m,
               "delta_total_unclamped": self.delta_total_unclamped,
               "monotone_safeguard": self.monotone_safeguard})
    }
    fn epsilon(&self) -> f64 {
        self.eps
    }
    fn delta(&self) -> f64 {
        self.delta_total
    }
}

const SAFEGUARD_GRID: usize = 256;

/// `max_{μ ≤ μ̄} T(ε; μ)` over a log grid plus the endpoint; the flag reports
/// whether the maximum exceeded `T(ε; μ̄)`.
fn tradeoff_upper(eps: f64, mu_bar: f64) -> (f64, bool) {
    let at_end = gaussian_tradeoff(eps, mu_bar);
    if !(mu_bar > 0.0) {
        return (at_end, false);
    }
    let lo = (mu_bar * 1e-6).ln();
    let hi = mu_bar.ln();
    let mut best = at_end;
    for i in 0..SAFEGUARD_GRID {
        let mu = (lo + (hi - lo) * i as f64 / SAFEGUARD_GRID as f64).exp();
        best = best.max(gaussian_tradeoff(eps, mu));
    }
    (best, best > at_end)
}

pub fn account_small_r(eps: f64, sens_frob: f64, s: usize, d: usize, r: usize, sigma: f64, alpha: f64) -> Result<SmallRReport> {
    if !(eps > 0.0) || !eps.is_finite() {
        return domain(format!("eps must be positive, got {eps}"));
    }
    if !(sens_frob >= 0.0) || !sens_frob.is_finite() {
        return domain(format!("sensitivity must be finite and nonnegative, got {sens_frob}"));
    }
    if !(sigma > 0.0) {
        return domain(format!("sigma must be positive, got {sigma}"));
    }
    let delta_m = delta_m_bound(s, alpha, r, d)?;
    let mu_bar = alpha * sens_frob * sens_frob / (sigma * sigma);
    let (delta_e, safeguard) = tradeoff_upper(eps, mu_bar);
    let unclamped = delta_e + delta_m;
    Ok(SmallRReport {
        eps,
        sens_frob,
        s,
        d,
        r,
        sigma,
        alpha,
        mu_bar,
        delta_e,
        delta_m,
        delta_total: clamp01(unclamped),
        delta_total_unclamped: unclamped,
        monotone_safeguard: safeguard,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChooseAlphaReport {
    pub eps: f64,
    pub mu: f64,
    pub eta: f64,
    pub alpha: f64,
    pub alpha0: f64,
    pub delta_gauss: f64,
    /// `s·(1 − I_α(r/2, (d−r)/2))`, compared against `δ_Gauss/2`.
    pub beta_tail_exact: f64,
    /// `s · 2 exp(−η² r / 72)`, the looser sufficient bound.
    pub beta_tail_loose: f64,
    pub report: SmallRReport,
}

impl JsonReport for ChooseAlphaReport {
    fn kind(&self) -> &'static str {
        "choose_alpha"
    }
    fn inputs(&self) -> Value {
        json!({"eps": self.eps, "mu": self.mu, "s": self.report.s, "d": self.report.d,
               "r": self.report.r, "eta": self.eta})
    }
    fn intermediates(&self) -> Value {
        json!({"alpha": self.alpha, "alpha0": self.alpha0, "delta_gauss": self.delta_gauss,
               "beta_tail_exact": self.beta_tail_exact, "beta_tail_loose": self.beta_tail_loose,
               "mu_bar": self.report.mu_bar, "delta_E": self.report.delta_e,
               "delta_M": self.report.delta_m})
    }
    fn epsilon(&self) -> f64 {
        self.eps
    }
    fn delta(&self) -> f64 {
        self.report.delta_total
    }
}

/// Closed-form rank `(72/η²) ln(4s/δ_Gauss)` above which the loose tail bound
/// meets the lower condition.
pub fn loose_rank_threshold(eta: f64, s: usize, delta_gauss: f64) -> f64 {
    72.0 / (eta * eta) * (4.0 * s as f64 / delta_gauss).ln()
}

/// Solves `T(ε; α₀ μ) = T(ε; μ)/2` for `α₀ ∈ (0, 1)` by bisection.
pub fn solve_alpha0(eps: f64, mu: f64, max_iter: usize) -> Result<f64> {
    let target = 0.5 * gaussian_tradeoff(eps, mu);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..max_iter {
        if hi - lo <= 1e-10 {
            return Ok(0.5 * (lo + hi));
        }
        let mid = 0.5 * (lo + hi);
        if gaussian_tradeoff(eps, mid * mu) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Convergence(format!(
        "alpha0 bisection did not reach 1e-10 in {max_iter} iterations"
    )))
}

/// Picks `α = (1+η) r/d` and checks both conditions under which the small-rank
/// bound beats the Gaussian baseline.
///
/// The lower condition is checked on the exact Beta tail `s(1 − I_α)`, which the
/// closed-form `2s exp(−η² r/72)` only bounds from above.
pub fn choose_alpha(eps: f64, mu: f64, s: usize, d: usize, r: usize, eta: f64) -> Result<ChooseAlphaReport> {
    if !(eps > 0.0) || !(mu > 0.0) {
        return domain(format!("eps and mu must be positive, got eps = {eps}, mu = {mu}"));
    }
    if !(eta > 0.0 && eta < 1.0) {
        return domain(format!("eta must lie in (0, 1), got {eta}"));
    }
    if s == 0 || r == 0 {
        return domain("s and r must be positive");
    }
    if 2 * r > d {
        return Err(Error::Regime(format!("need r <= d/2, got r = {r}, d = {d}")));
    }
    let delta_gauss = gaussian_tradeoff(eps, mu);
    let alpha0 = solve_alpha0(eps, mu, 200)?;
    let alpha_of = |r: usize| (1.0 + eta) * r as f64 / d as f64;
    let tail_of = |r: usize| -> Result<f64> { delta_m_bound(s, alpha_of(r).min(1.0), r, d) };
    let alpha = alpha_of(r);
    let tail = tail_of(r)?;
    let half = 0.5 * delta_gauss;

    if tail > half {
        let loose = loose_rank_threshold(eta, s, delta_gauss);
        let mut minimal = None;
        for rr in r + 1..=d / 2 {
            if tail_of(rr)? <= half {
                minimal = Some(rr);
                break;
            }
        }
        let minimal = minimal.map_or("none up to d/2".to_string(), |m| m.to_string());
        return Err(Error::Regime(format!(
            "lower condition violated: s(1 - I_alpha) = {tail:.6e} exceeds delta_Gauss/2 = {half:.6e} at r = {r}; \
             minimal r satisfying it: {minimal}; closed-form sufficient r >= {loose:.1}"
        )));
    }
    if alpha > alpha0 {
        let max_r = (alpha0 * d as f64 / (1.0 + eta)).floor() as usize;
        return Err(Error::Regime(format!(
            "upper condition violated: alpha = {alpha:.6e} exceeds alpha0 = {alpha0:.6e}; maximal r satisfying it: {max_r}"
        )));
    }
    let report = account_small_r(eps, mu.sqrt(), s, d, r, 1.0, alpha)?;
    if !(report.delta_total < delta_gauss) {
        return Err(Error::Regime(format!(
            "small-rank bound {} does not improve on delta_Gauss = {delta_gauss}",
            report.delta_total
        )));
    }
    Ok(ChooseAlphaReport {
        eps,
        mu,
        eta,
        alpha,
        alpha0,
        delta_gauss,
        beta_tail_exact: tail,
        beta_tail_loose: s as f64 * 2.0 * (-eta * eta * r as f64 / 72.0).exp(),
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LargeRInputs {
    pub d: usize,
    pub r: usize,
    pub s: usize,
    pub p: usize,
    pub delta_v: f64,
    pub sigma_g: f64,
    pub sigma_m: f64,
    pub beta: f64,
    pub delta_par: f64,
    /// Alignment of the residual components across neighbors; supplied by the caller.
    pub rho_perp: f64,
    pub delta_prime_perp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LargeRReport {
    pub inputs: LargeRInputs,
    pub g_beta: f64,
    pub gamma_beta: f64,
    pub eps_par: f64,
    pub eps_perp: f64,
    pub delta_perp: f64,
    pub eps_total: f64,
    pub delta_total: f64,
    pub delta_total_unclamped: f64,
    pub residual: VecAccountReport,
}

impl JsonReport for LargeRReport {
    fn kind(&self) -> &'static str {
        "account_large_r"
    }
    fn inputs(&self) -> Value {
        serde_json::to_value(self.inputs).expect("serializable inputs")
    }
    fn intermediates(&self) -> Value {
        json!({"g_beta": self.g_beta, "Gamma_beta": self.gamma_beta, "eps_par": self.eps_par,
               "eps_perp": self.eps_perp, "delta_perp": self.delta_perp,
               "delta_total_unclamped": self.delta_total_unclamped,
               "residual": self.residual.to_json()})
    }
    fn epsilon(&self) -> f64 {
        self.eps_total
    }
    fn delta(&self) -> f64 {
        self.delta_total
    }
}

pub fn account_large_r(inp: &LargeRInputs, support: SupportMc) -> Result<LargeRReport> {
    let LargeRInputs { d, r, s, p, delta_v, sigma_g, sigma_m, beta, delta_par, .. } = *inp;
    if p > s.min(r) {
        return domain(format!("p = {p} exceeds min(s, r) = {}", s.min(r)));
    }
    if r <= p {
        return Err(Error::Degenerate(format!("residual rank r - p = {} leaves nothing to account", r as i64 - p as i64)));
    }
    if d <= s + 1 {
        return domain(format!("residual dimension d - s = {} must be at least 2", d as i64 - s as i64));
    }
    if !(delta_v >= 0.0) || !(sigma_g > 0.0) || !(sigma_m > 0.0) {
        return domain("need delta_v >= 0, sigma_G > 0 and sigma_M > 0");
    }
    check_prob_open("beta", beta)?;
    check_prob_open("delta_par", delta_par)?;
    let g_beta = (2.0 * (2.0 / beta).ln()).sqrt();
    let (sd, sp) = ((d as f64).sqrt(), (p as f64).sqrt());
    let gamma_beta = sigma_m * sigma_m * (sd + sp + g_beta) * (sp + g_beta);
    let eps_par = gamma_beta * delta_v / sigma_g * (2.0 * (1.25 / delta_par).ln()).sqrt();
    let spec = AlignmentSpec::new(inp.rho_perp, d - s, r - p)?;
    let residual = account_vec(&spec, inp.delta_prime_perp, support)?;
    let eps_perp = residual.eps_rho;
    let delta_perp = residual.delta_rho;
    let unclamped = delta_par + delta_perp + beta;
    Ok(LargeRReport {
        inputs: *inp,
        g_beta,
        gamma_beta,
        eps_par,
        eps_perp,
        delta_perp,
        eps_total: eps_par + eps_perp,
        delta_total: clamp01(unclamped),
        delta_total_unclamped: unclamped,
        residual,
    })
}

/// `(Σ ε_i, Σ δ_i)`, repeated `k` times when `k` is given.
pub fn compose_basic(budgets: &[(f64, f64)], k: Option<usize>) -> Result<(f64, f64)> {
    if budgets.is_empty() {
        return domain("nothing to compose");
    }
    let (e, d) = budgets.iter().fold((0.0, 0.0), |acc, b| (acc.0 + b.0, acc.1 + b.1));
    let k = k.unwrap_or(1) as f64;
    Ok((k * e, k * d))
}

/// `T(ε, Σ μ_t) + T·δ_p` for `T` conditionally Gaussian steps.
pub fn compose_gaussian_steps(mu_list: &[f64], eps: f64, per_step_delta_p: f64) -> Result<f64> {
    if mu_list.iter().any(|m| !(*m >= 0.0)) {
        return domain("every per-step mu must be nonnegative");
    }
    if !(per_step_delta_p >= 0.0 && per_step_delta_p <= 1.0) {
        return domain(format!("per-step delta_p must lie in [0, 1], got {per_step_delta_p}"));
    }
    let total: f64 = mu_list.iter().sum();
    Ok(clamp01(gaussian_tradeoff(eps, total) + mu_list.len() as f64 * per_step_delta_p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JlZeta {
    pub zeta: f64,
    /// `ζ ≥ 1`: the lower side of the distortion bound says nothing.
    pub vacuous: bool,
}

/// `ζ = √(12 ln(2n/δ_JL)/r)`.
pub fn jl_clip_zeta(n: usize, r: usize, delta_jl: f64) -> Result<JlZeta> {
    if r == 0 || n == 0 {
        return domain("n and r must be positive");
    }
    check_prob_open("delta_JL", delta_jl)?;
    let zeta = (12.0 * (2.0 * n as f64 / delta_jl).ln() / r as f64).sqrt();
    Ok(JlZeta {
        zeta,
        vacuous: zeta >= 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::randmat::{capture_fraction, sample_gaussian_matrix, std_normal, Matrix};
    use proptest::prelude::*;
    use statrs::distribution::{Beta, ChiSquared, ContinuousCDF, Normal, StudentsT};

    fn quick() -> SupportMc {
        SupportMc { n: 20_000, seed: Seed::new(1) }
    }

    fn nphi(x: f64) -> f64 {
        Normal::new(0.0, 1.0).unwrap().cdf(x)
    }

    #[test]
    fn min_alignment_examples() {
        let v = Vector::from_vec(vec![0.6, 0.8]);
        assert!((min_alignment(&[(v.clone(), v.clone())]).unwrap() - 1.0).abs() < 1e-15);
        let e1 = Vector::from_vec(vec![1.0, 0.0]);
        let e2 = Vector::from_vec(vec![0.0, 1.0]);
        assert_eq!(min_alignment(&[(e1.clone(), e2)]).unwrap(), 0.0);
        let at = |c: f64| Vector::from_vec(vec![c, (1.0 - c * c).sqrt()]);
        let pairs: Vec<_> = [0.9, 0.7, 0.95].iter().map(|&c| (e1.clone(), at(c))).collect();
        assert!((min_alignment(&pairs).unwrap() - 0.7).abs() < 1e-12);
        assert!(min_alignment(&[]).is_err());
    }

    #[test]
    fn alignment_bound_examples() {
        assert_eq!(alignment_lower_bound(0.0, 1.0, 3).unwrap(), 1.0);
        assert!((alignment_lower_bound(1.0, 1.0, 4).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(alignment_lower_bound(10.0, 0.1, 1).unwrap(), -1.0);
        assert!(alignment_lower_bound(1.0, 0.0, 4).is_err());
    }

    #[test]
    fn alignment_bound_holds_for_neighbor_swaps() {
        // g(x) = offset + L·u with a unit offset so that ‖mean‖ >= c0 = 1 - L.
        let (l, d, n) = (1.0f64, 5usize, 50usize);
        let offset = 2.0;
        let c0 = offset - l;
        let bound = alignment_lower_bound(l, c0, n).unwrap();
        let mut rng = Seed::new(3).rng();
        let unit = |rng: &mut rand_chacha::ChaCha8Rng| {
            let z = Vector::from_fn(d, |_, _| std_normal(rng));
            let nz = z.norm();
            z / nz
        };
        let mut e1 = Vector::zeros(d);
        e1[0] = offset;
        let mut rows: Vec<Vector> = (0..n).map(|_| &e1 + unit(&mut rng) * l).collect();
        for _ in 0..10_000 {
            let sum: Vector = rows.iter().fold(Vector::zeros(d), |a, b| a + b);
            let i = (std_normal(&mut rng).abs() * 1e6) as usize % n;
            let repl = &e1 + unit(&mut rng) * l;
            let sum2 = &sum - &rows[i] + &repl;
            let cos = sum.dot(&sum2) / (sum.norm() * sum2.norm());
            assert!(cos >= bound - 1e-12, "{cos} < {bound}");
            rows[i] = repl;
        }
    }

    #[test]
    fn vec_rho_one() {
        let rep = account_vec(&AlignmentSpec::new(1.0, 50, 8).unwrap(), 0.01, quick()).unwrap();
        assert_eq!(rep.k, 0.0);
        assert_eq!(rep.eps_rho, 0.0);
        assert_eq!(rep.delta_support, 0.0);
        assert!((rep.delta_rho - 0.03).abs() < 1e-15);
    }

    #[test]
    fn vec_formula_oracle() {
        let (rho, d, r, dp) = (0.999f64, 400usize, 128usize, 0.001f64);
        let rep = account_vec(&AlignmentSpec::new(rho, d, r).unwrap(), dp, quick()).unwrap();
        let t = StudentsT::new(0.0, 1.0, r as f64).unwrap().inverse_cdf(1.0 - dp);
        let kappa = ChiSquared::new((d + r - 1) as f64).unwrap().inverse_cdf(1.0 - dp);
        let k = ((1.0 - rho * rho) / r as f64).sqrt() * t;
        let eps = (d as f64 - r as f64 + 1.0) / 2.0 * (rho + k).ln() + (1.0 - rho + k) * kappa / (2.0 * (rho - k));
        assert!((rep.k - k).abs() <= 1e-8 * k);
        assert!((rep.b - kappa).abs() <= 1e-8 * kappa);
        assert!((rep.eps_rho - eps).abs() <= 1e-7 * eps, "{} vs {eps}", rep.eps_rho);
        assert!(rep.eps_rho > 0.0 && rep.eps_rho.is_finite());
        assert!((rep.eps_from_intermediates() - rep.eps_rho).abs() <= 1e-12 * rep.eps_rho);
        assert_eq!(rep.a_minus, rho - rep.k);
        assert_eq!(rep.a_plus, rho + rep.k);
    }

    #[test]
    fn vec_inadmissible() {
        let err = account_vec(&AlignmentSpec::new(0.1, 400, 16).unwrap(), 0.01, quick()).unwrap_err();
        let t = StudentsT::new(0.0, 1.0, 16.0).unwrap().inverse_cdf(0.99);
        let expect = t / (16.0 + t * t).sqrt();
        match err {
            Error::InadmissibleAlignment { threshold, .. } => assert!((threshold - expect).abs() < 1e-8),
            e => panic!("unexpected {e:?}"),
        }
        assert!(matches!(
            account_vec(&AlignmentSpec::new(-0.5, 400, 16).unwrap(), 0.01, quick()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn vec_eps_nonincreasing_in_rho() {
        let (d, r, dp) = (100usize, 10usize, 0.01);
        let thr = vec_threshold(r, dp).unwrap();
        let mut prev = f64::INFINITY;
        for i in 1..=50 {
            let rho = thr + (1.0 - thr) * i as f64 / 50.0;
            let rho = rho.min(1.0);
            let e = account_vec(&AlignmentSpec::new(rho, d, r).unwrap(), dp, SupportMc { n: 100, seed: Seed::new(1) })
                .unwrap()
                .eps_rho;
            assert!(e <= prev + 1e-12, "rho {rho}: {e} > {prev}");
            prev = e;
        }
    }

    #[test]
    fn tradeoff_examples() {
        assert_eq!(gaussian_tradeoff(1.0, 0.0), 0.0);
        let t = gaussian_tradeoff(10.0, 1.0);
        assert!(t > 0.0 && t < 1e-15);
        // as written, both tails meet at ε = 0 and cover all the mass
        assert!((gaussian_tradeoff(0.0, 3.0) - 1.0).abs() < 1e-15);
        let (e, m) = (1.0f64, 4.0f64);
        let oracle = nphi((-e - m / 2.0) / m.sqrt()) + 1.0 - nphi((e - m / 2.0) / m.sqrt());
        assert!((gaussian_tradeoff(e, m) - oracle).abs() < 1e-10);
        assert!((gaussian_tradeoff(e, m) - 0.7582696625428712).abs() < 1e-15);
    }

    #[test]
    fn tradeoff_monotone_in_mu() {
        for &eps in &[0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0] {
            let mut prev = 0.0;
            for i in 0..=600 {
                let mu = 10f64.powf(-6.0 + 9.0 * i as f64 / 600.0);
                let t = gaussian_tradeoff(eps, mu);
                assert!(t >= prev - 1e-15, "eps {eps} mu {mu}: {t} < {prev}");
                prev = t;
            }
        }
        let rep = account_small_r(1.0, 1.0, 1, 100, 10, 1.0, 0.3).unwrap();
        assert!(!rep.monotone_safeguard);
    }

    #[test]
    fn delta_m_examples() {
        assert!(delta_m_bound(1, 1.0 - 1e-15, 5, 10).unwrap() < 1e-12);
        assert!((delta_m_bound(1, 0.5, 5, 10).unwrap() - 0.5).abs() < 1e-12);
        assert!(delta_m_bound(1, 0.5, 10, 10).is_err());
        let exact = 1.0 - Beta::new(5.0, 45.0).unwrap().cdf(0.2);
        assert!((delta_m_bound(1, 0.2, 10, 100).unwrap() - exact).abs() < 1e-12);
    }

    #[test]
    fn delta_m_dominates_capture_tail() {
        let (d, r, alpha) = (100usize, 10usize, 0.3);
        let dv = Matrix::from_fn(d, 1, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let n = 100_000u64;
        let hits = (0..n)
            .filter(|&i| {
                let z = sample_gaussian_matrix(d, r, 0.1, Seed::new(4).substream(i)).unwrap();
                capture_fraction(&z, &dv).unwrap() > alpha
            })
            .count() as f64;
        let p = hits / n as f64;
        assert!(delta_m_bound(1, alpha, r, d).unwrap() >= p - 3.0 * (p * (1.0 - p) / n as f64).sqrt());
    }

    #[test]
    fn beta_tail_examples() {
        assert_eq!(beta_tail_bound(0.9, 1_000_000).unwrap(), 0.0);
        assert_eq!(beta_tail_bound(0.5, 72).unwrap(), 1.0);
        assert!((2.0 * (-0.25f64).exp() - 1.5576).abs() < 1e-4);
        let (eta, r, d) = (0.5, 2000usize, 1_000_000usize);
        let alpha = (1.0 + eta) * r as f64 / d as f64;
        let exact = 1.0 - Beta::new(r as f64 / 2.0, (d - r) as f64 / 2.0).unwrap().cdf(alpha);
        assert!(beta_tail_bound(eta, r).unwrap() >= exact);
    }

    #[test]
    fn small_r_examples() {
        let rep = account_small_r(1.0, 0.0, 2, 100, 10, 1.0, 0.2).unwrap();
        assert_eq!(rep.delta_e, 0.0);
        assert_eq!(rep.delta_total, rep.delta_m);

        let rep = account_small_r(1.0, 2.0, 1, 100, 10, 1.0, 1.0).unwrap();
        assert!(rep.delta_m < 1e-15);
        assert!((rep.delta_e - gaussian_tradeoff(1.0, 4.0)).abs() < 1e-15);

        let rep = account_small_r(1.0, 1.0, 1, 2048, 32, 0.5, 0.0235).unwrap();
        assert!(rep.delta_total < gaussian_tradeoff(1.0, 4.0));
        assert!((rep.delta_total - rep.delta_e - rep.delta_m).abs() < 1e-15);
        assert!((rep.mu_bar - 0.0235 * 4.0).abs() < 1e-15);
    }

    #[test]
    fn choose_alpha_examples() {
        let out = choose_alpha(1.0, 4.0, 1, 2048, 64, 0.5).unwrap();
        assert!((out.alpha - 0.046875).abs() < 1e-15);
        assert!(out.report.delta_total < gaussian_tradeoff(1.0, 4.0));
        let target = 0.5 * gaussian_tradeoff(1.0, 4.0);
        assert!((gaussian_tradeoff(1.0, out.alpha0 * 4.0) - target).abs() < 1e-9);

        let doubled = choose_alpha(1.0, 4.0, 1, 4096, 64, 0.5).unwrap();
        assert_eq!(doubled.alpha, out.alpha / 2.0);

        match choose_alpha(1.0, 4.0, 1_000_000, 2048, 10, 0.5).unwrap_err() {
            Error::Regime(msg) => {
                assert!(msg.contains("lower condition"));
                let thr = loose_rank_threshold(0.5, 1_000_000, gaussian_tradeoff(1.0, 4.0));
                assert!(msg.contains(&format!("{thr:.1}")));
            }
            e => panic!("unexpected {e:?}"),
        }
        assert!(matches!(choose_alpha(1.0, 4.0, 1, 2048, 1500, 0.5), Err(Error::Regime(_))));
    }

    #[test]
    fn alpha0_starved_solver() {
        assert!(solve_alpha0(1.0, 4.0, 5).unwrap_err().is_convergence());
    }

    fn large_inputs() -> LargeRInputs {
        LargeRInputs {
            d: 200,
            r: 150,
            s: 20,
            p: 20,
            delta_v: 0.1,
            sigma_g: 1.0,
            sigma_m: 1.0 / 150f64.sqrt(),
            beta: 0.01,
            delta_par: 1e-5,
            rho_perp: 0.999,
            delta_prime_perp: 1e-3,
        }
    }

    #[test]
    fn large_r_oracle() {
        let inp = large_inputs();
        let rep = account_large_r(&inp, quick()).unwrap();
        let g = (2.0 * (2.0f64 / 0.01).ln()).sqrt();
        let sm2 = 1.0 / 150.0;
        let gamma = sm2 * (200f64.sqrt() + 20f64.sqrt() + g) * (20f64.sqrt() + g);
        let eps_par = gamma * 0.1 / 1.0 * (2.0 * (1.25f64 / 1e-5).ln()).sqrt();
        assert!((rep.g_beta - g).abs() < 1e-12);
        assert!((rep.gamma_beta - gamma).abs() < 1e-12);
        assert!((rep.eps_par - eps_par).abs() < 1e-12);
        let vec = account_vec(&AlignmentSpec::new(0.999, 180, 130).unwrap(), 1e-3, quick()).unwrap();
        assert_eq!(rep.eps_perp, vec.eps_rho);
        assert!((rep.eps_total - rep.eps_par - rep.eps_perp).abs() < 1e-12);
        assert!((rep.delta_total - (1e-5 + rep.delta_perp + 0.01)).abs() < 1e-15);
        assert!(rep.eps_total.is_finite());
    }

    #[test]
    fn large_r_edges() {
        let mut inp = large_inputs();
        inp.delta_v = 0.0;
        let rep = account_large_r(&inp, quick()).unwrap();
        assert_eq!(rep.eps_par, 0.0);
        assert_eq!(rep.eps_total, rep.eps_perp);

        inp.rho_perp = 1.0;
        let rep = account_large_r(&inp, quick()).unwrap();
        assert_eq!(rep.eps_perp, 0.0);
        assert!((rep.delta_perp - 3e-3).abs() < 1e-15);

        inp.r = 20;
        assert!(matches!(account_large_r(&inp, quick()), Err(Error::Degenerate(_))));
        let mut inp = large_inputs();
        inp.rho_perp = 0.05;
        assert!(matches!(account_large_r(&inp, quick()), Err(Error::InadmissibleAlignment { .. })));
    }

    #[test]
    fn compose_examples() {
        let (e, d) = compose_basic(&[(1.0, 1e-5)], Some(3)).unwrap();
        assert_eq!(e, 3.0);
        assert!((d - 3e-5).abs() < 1e-20);
        assert_eq!(compose_basic(&[(0.7, 0.1)], None).unwrap(), (0.7, 0.1));
        assert_eq!(compose_basic(&[(0.5, 0.0), (0.5, 0.0)], None).unwrap(), (1.0, 0.0));
        assert!(compose_basic(&[], None).is_err());
    }

    proptest! {
        #[test]
        fn compose_basic_order_free(v in proptest::collection::vec((0.0f64..5.0, 0.0f64..0.1), 1..12)) {
            let (e1, d1) = compose_basic(&v, None).unwrap();
            let mut rev = v.clone();
            rev.reverse();
            let (e2, d2) = compose_basic(&rev, None).unwrap();
            prop_assert!((e1 - e2).abs() < 1e-12 && (d1 - d2).abs() < 1e-12);
            let mid = v.len() / 2;
            if mid > 0 {
                let a = compose_basic(&v[..mid], None).unwrap();
                let b = compose_basic(&v[mid..], None).unwrap();
                let (e3, d3) = compose_basic(&[a, b], None).unwrap();
                prop_assert!((e1 - e3).abs() < 1e-12 && (d1 - d3).abs() < 1e-12);
            }
        }

        #[test]
        fn small_r_total_is_sum(alpha in 0.01f64..0.99, sens in 0.0f64..3.0, eps in 0.1f64..4.0) {
            let rep = account_small_r(eps, sens, 2, 60, 12, 0.8, alpha).unwrap();
            prop_assert!((rep.delta_total_unclamped - rep.delta_e - rep.delta_m).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&rep.delta_total));
        }
    }

    #[test]
    fn gaussian_steps_examples() {
        let dp = 1e-4;
        let one = compose_gaussian_steps(&[0.5], 1.0, dp).unwrap();
        let rep = account_small_r(1.0, 0.5f64.sqrt(), 1, 100, 10, 1.0, 1.0).unwrap();
        assert!((one - (rep.delta_e + dp)).abs() < 1e-15);
        assert!((compose_gaussian_steps(&[0.0, 0.0, 0.0], 1.0, dp).unwrap() - 3.0 * dp).abs() < 1e-18);

        // privacy-loss Monte Carlo: the summed loss of independent steps is N(μ/2, μ)
        let two = compose_gaussian_steps(&[1.0, 3.0], 2.0, dp).unwrap();
        assert!((two - (gaussian_tradeoff(2.0, 4.0) + 2.0 * dp)).abs() < 1e-15);
        let n = 1_000_000;
        let mut rng = Seed::new(6).rng();
        let mut hits = 0usize;
        for _ in 0..n {
            let l1 = 0.5 + std_normal(&mut rng);
            let l2 = 1.5 + 3f64.sqrt() * std_normal(&mut rng);
            if (l1 + l2).abs() > 2.0 {
                hits += 1;
            }
        }
        let p = hits as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((gaussian_tradeoff(2.0, 4.0) - p).abs() <= 2.0 * se, "{p}");
    }

    #[test]
    fn jl_examples() {
        let z = jl_clip_zeta(1, 12, 2.0 / std::f64::consts::E).unwrap();
        assert!((z.zeta - 1.0).abs() < 1e-12);
        assert!(z.vacuous);
        assert!(jl_clip_zeta(10, 1_000_000_000, 0.01).unwrap().zeta < 1e-3);
        let (d, r, dj) = (2000usize, 500usize, 0.01);
        let z = jl_clip_zeta(1, r, dj).unwrap().zeta;
        let a = sample_gaussian_matrix(r, d, 1.0 / r as f64, Seed::new(9)).unwrap();
        let mut rng = Seed::new(10).rng();
        let mut ok = 0;
        for _ in 0..100 {
            let x = Vector::from_fn(d, |_, _| std_normal(&mut rng));
            let x = &x / x.norm();
            let q = (&a * &x).norm_squared();
            if (1.0 - z..=1.0 + z).contains(&q) {
                ok += 1;
            }
        }
        assert!(ok >= 99);
    }
}
