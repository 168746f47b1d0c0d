//! Monte Carlo estimation of the exact privacy profile of the vector projection
//! mechanism, and the closed-form density of `Mv` used to validate it.
//!
//! Samples are drawn in fixed-size chunks, each from its own substream of the
//! caller's seed, and reduced in chunk order. Results therefore do not depend on
//! the number of worker threads.

use crate::error::{domain, Error, Result};
use crate::randmat::{chi2_sample, std_normal, Seed, Vector};
use crate::specialfn::{log_gamma, phi};
use crate::stats::pav_nonincreasing;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Samples per parallel work unit.
pub const CHUNK: usize = 1 << 16;

/// Default Monte Carlo sample count.
pub const DEFAULT_SAMPLES: usize = 1_000_000;

/// Relative-alignment and magnitude ratios `A = v′ᵀy / vᵀy`, `B = r‖y‖² / vᵀy`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioSample {
    pub a: f64,
    pub b: f64,
}

fn chunk_sizes(n: usize) -> Vec<(u64, usize)> {
    (0..n.div_ceil(CHUNK))
        .map(|i| (i as u64, CHUNK.min(n - i * CHUNK)))
        .collect()
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho.abs() <= 1.0) {
        return domain(format!("rho must lie in [-1, 1], got {rho}"));
    }
    Ok(())
}

fn draw_ratio<R: rand::Rng + ?Sized>(rng: &mut R, rho: f64, coef: f64, d: usize, r: usize) -> RatioSample {
    let k1 = chi2_sample(rng, r);
    let k2 = std_normal(rng);
    let k3 = chi2_sample(rng, d - 2);
    RatioSample {
        a: rho + coef * k2 / k1.sqrt(),
        b: k1 + k2 * k2 + k3,
    }
}

/// `n` i.i.d. draws of `(A, B)` through the representation
/// `(ρ + √(1−ρ²) K₂/√K₁, K₁ + K₂² + K₃)`, `K₁ ∼ χ²_r`, `K₂ ∼ N(0,1)`, `K₃ ∼ χ²_{d−2}`.
pub fn sample_ratio_stats(rho: f64, d: usize, r: usize, n: usize, seed: Seed) -> Result<Vec<RatioSample>> {
    if d < 3 {
        return domain(format!("ratio sampler needs d >= 3, got {d}"));
    }
    if r == 0 {
        return domain("r must be positive");
    }
    check_rho(rho)?;
    let coef = (1.0 - rho * rho).max(0.0).sqrt();
    let chunks: Vec<Vec<RatioSample>> = chunk_sizes(n)
        .into_par_iter()
        .map(|(i, len)| {
            let mut rng = seed.substream(i).rng();
            (0..len).map(|_| draw_ratio(&mut rng, rho, coef, d, r)).collect()
        })
        .collect();
    Ok(chunks.concat())
}

/// `L = ((d−r+1)/2) ln A + (B/2)(1/A − 1)`, with `+∞` when `A ≤ 0`.
pub fn privacy_loss(sample: RatioSample, d: usize, r: usize) -> f64 {
    if !(sample.a > 0.0) {
        return f64::INFINITY;
    }
    let a = sample.a;
    0.5 * (d as f64 - r as f64 + 1.0) * a.ln() + 0.5 * sample.b * (1.0 / a - 1.0)
}

/// Monte Carlo estimate of `E_{X∼χ²_r}[Φ(−ρ√X/√(1−ρ²))]` with its standard error.
pub fn delta_support(rho: f64, r: usize, n: usize, seed: Seed) -> Result<(f64, f64)> {
    if !(rho > 0.0 && rho <= 1.0) {
        return domain(format!("support mass needs rho in (0, 1], got {rho}"));
    }
    if r == 0 || n == 0 {
        return domain("r and n must be positive");
    }
    if rho == 1.0 {
        return Ok((0.0, 0.0));
    }
    let scale = rho / (1.0 - rho * rho).sqrt();
    let sums: Vec<(f64, f64)> = chunk_sizes(n)
        .into_par_iter()
        .map(|(i, len)| {
            let mut rng = seed.substream(i).rng();
            let mut s = 0.0;
            let mut s2 = 0.0;
            for _ in 0..len {
                let x = chi2_sample(&mut rng, r);
                let v = phi(-scale * x.sqrt());
                s += v;
                s2 += v * v;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = sums.iter().fold((0.0, 0.0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
    let nf = n as f64;
    let mean = s / nf;
    let var = ((s2 / nf - mean * mean) * nf / (nf - 1.0).max(1.0)).max(0.0);
    Ok((mean, (var / nf).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub eps: f64,
    /// After the isotonic correction.
    pub delta_hat: f64,
    /// Before the isotonic correction.
    pub delta_raw: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyProfile {
    pub rho: f64,
    pub d: usize,
    pub r: usize,
    pub grid: Vec<ProfilePoint>,
    pub n_samples: usize,
    pub seed: Seed,
    /// `(estimate, stderr)`.
    pub delta_support_hat: (f64, f64),
    /// Share of samples with `A ≤ 0` (infinite privacy loss).
    pub sentinel_fraction: f64,
}

impl PrivacyProfile {
    /// Smallest grid ε whose corrected `delta_hat` is at most `target_delta`.
    pub fn epsilon_at(&self, target_delta: f64) -> Option<f64> {
        self.grid.iter().find(|p| p.delta_hat <= target_delta).map(|p| p.eps)
    }

    /// The grid point with the largest ε not exceeding `eps`.
    pub fn point_at_or_below(&self, eps: f64) -> Option<&ProfilePoint> {
        self.grid.iter().take_while(|p| p.eps <= eps).last()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_profiles_csv(out, std::slice::from_ref(self))
    }
}

/// All profiles in one CSV `eps,delta_hat,stderr,n,rho,d,r,seed`, one block per profile.
pub fn write_profiles_csv<W: Write>(out: W, profiles: &[PrivacyProfile]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["eps", "delta_hat", "stderr", "n", "rho", "d", "r", "seed"])?;
    for prof in profiles {
        for p in &prof.grid {
            w.write_record([
                p.eps.to_string(),
                p.delta_hat.to_string(),
                p.stderr.to_string(),
                prof.n_samples.to_string(),
                prof.rho.to_string(),
                prof.d.to_string(),
                prof.r.to_string(),
                prof.seed.master.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Estimates `δ(ε) = P_{y∼p}(L > ε) + δ_support` on `eps_grid`.
///
/// Losses come from `seed.substream(0)` and the support mass from
/// `seed.substream(1)`. Samples with `A ≤ 0` count as exceeding every ε and are
/// also covered by the support term, so the estimate errs on the high side.
pub fn mc_privacy_profile(rho: f64, d: usize, r: usize, eps_grid: &[f64], n: usize, seed: Seed) -> Result<PrivacyProfile> {
    if !(rho > 0.0 && rho <= 1.0) {
        return domain(format!("profile needs rho in (0, 1], got {rho}"));
    }
    if d < 3 || r == 0 {
        return domain(format!("profile needs d >= 3 and r >= 1, got d = {d}, r = {r}"));
    }
    if n == 0 {
        return domain("sample count must be positive");
    }
    if eps_grid.is_empty() {
        return domain("eps grid is empty");
    }
    if eps_grid.windows(2).any(|w| !(w[1] > w[0])) || eps_grid.iter().any(|e| !e.is_finite()) {
        return domain("eps grid must be finite and strictly increasing");
    }
    let coef = (1.0 - rho * rho).max(0.0).sqrt();
    let base = seed.substream(0);
    let tallies: Vec<(Vec<u64>, u64)> = chunk_sizes(n)
        .into_par_iter()
        .map(|(i, len)| {
            let mut rng = base.substream(i).rng();
            let mut losses: Vec<f64> = (0..len)
                .map(|_| privacy_loss(draw_ratio(&mut rng, rho, coef, d, r), d, r))
                .collect();
            let sentinels = losses.iter().filter(|l| l.is_infinite()).count() as u64;
            losses.sort_by(|a, b| a.total_cmp(b));
            let counts = eps_grid
                .iter()
                .map(|&e| (len - losses.partition_point(|&l| l <= e)) as u64)
                .collect();
            (counts, sentinels)
        })
        .collect();
    let mut exceed = vec![0u64; eps_grid.len()];
    let mut sentinels = 0u64;
    for (counts, s) in &tallies {
        for (acc, c) in exceed.iter_mut().zip(counts) {
            *acc += c;
        }
        sentinels += s;
    }
    let support = delta_support(rho, r, n, seed.substream(1))?;
    let nf = n as f64;
    let raw: Vec<f64> = exceed.iter().map(|&c| (c as f64 / nf + support.0).min(1.0)).collect();
    let stderr: Vec<f64> = exceed
        .iter()
        .map(|&c| {
            let p = c as f64 / nf;
            (p * (1.0 - p) / nf + support.1 * support.1).sqrt()
        })
        .collect();
    let corrected = pav_nonincreasing(&raw, &vec![1.0; raw.len()]);
    let grid = eps_grid
        .iter()
        .enumerate()
        .map(|(i, &eps)| ProfilePoint {
            eps,
            delta_hat: corrected[i].clamp(0.0, 1.0),
            delta_raw: raw[i],
            stderr: stderr[i],
        })
        .collect();
    Ok(PrivacyProfile {
        rho,
        d,
        r,
        grid,
        n_samples: n,
        seed,
        delta_support_hat: support,
        sentinel_fraction: sentinels as f64 / nf,
    })
}

/// `ln p(y)` for `y = M v`, `M = Z Zᵀ`, `Z` with i.i.d. N(0, σ²) entries and `‖v‖ = 1`:
/// `p(y) = C (vᵀy)^{(r−d−1)/2} exp(−‖y‖²/(2σ² vᵀy))`,
/// `C = 1/(2^{r/2} Γ(r/2) σ^{r+d−1} (2π)^{(d−1)/2})`.
pub fn log_density_mv(y: &Vector, v: &Vector, r: usize, sigma2: f64) -> Result<f64> {
    let d = y.len();
    if v.len() != d {
        return Err(Error::Shape(format!("y has length {d}, v has length {}", v.len())));
    }
    if r == 0 || !(sigma2 > 0.0) {
        return domain("r and sigma2 must be positive");
    }
    let vn = v.norm();
    if (vn - 1.0).abs() > 1e-8 {
        return domain(format!("v must be a unit vector, got norm {vn}"));
    }
    let t = v.dot(y);
    if !(t > 0.0) {
        return domain(format!("y lies outside the support (vᵀy = {t} <= 0)"));
    }
    let (df, rf) = (d as f64, r as f64);
    let log_c = -0.5 * rf * std::f64::consts::LN_2
        - log_gamma(0.5 * rf)?
        - 0.5 * (rf + df - 1.0) * sigma2.ln()
        - 0.5 * (df - 1.0) * (2.0 * std::f64::consts::PI).ln();
    Ok(log_c + 0.5 * (rf - df - 1.0) * t.ln() - y.norm_squared() / (2.0 * sigma2 * t))
}

/// Closed-form `(ε_ρ, δ_ρ)` set against the Monte Carlo profile at the same δ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub rho: f64,
    pub d: usize,
    pub r: usize,
    pub target_delta: f64,
    /// `(δ − δ_support)/3`, so that `δ_ρ` lands on the target.
    pub delta_prime: f64,
    pub eps_theorem: f64,
    pub delta_theorem: f64,
    /// Smallest grid ε with `delta_hat ≤ δ`; `None` if the grid is too short.
    pub eps_hat: Option<f64>,
    /// Profile at the last grid point not above `eps_theorem`.
    pub delta_hat_at_theorem: f64,
    pub stderr_at_theorem: f64,
    /// `delta_hat_at_theorem ≤ δ + 3·stderr`.
    pub dominated: bool,
}

/// Runs the accountant and the profile for one rank. The support term comes from
/// `seed.substream(2)` and the profile from `seed`; the grid has spacing
/// `eps_step` and runs to `1.25 ε_ρ`.
pub fn dominance_check(rho: f64, d: usize, r: usize, target_delta: f64, n: usize, eps_step: f64, seed: Seed) -> Result<(DominanceReport, PrivacyProfile)> {
    use crate::accountants::{account_vec, AlignmentSpec, SupportMc};
    if !(target_delta > 0.0 && target_delta < 1.0) {
        return domain(format!("target delta must lie in (0, 1), got {target_delta}"));
    }
    if !(eps_step > 0.0) {
        return domain(format!("eps step must be positive, got {eps_step}"));
    }
    let support = SupportMc { n, seed: seed.substream(2) };
    let (ds, _) = delta_support(rho, r, n, support.seed)?;
    let delta_prime = (target_delta - ds) / 3.0;
    if !(delta_prime > 0.0) {
        return Err(Error::Precondition(format!(
            "support mass {ds} already exceeds the target delta {target_delta}"
        )));
    }
    let acct = account_vec(&AlignmentSpec::new(rho, d, r)?, delta_prime, support)?;
    let top = 1.25 * acct.eps_rho.max(eps_step);
    let steps = (top / eps_step).ceil() as usize;
    let grid: Vec<f64> = (0..=steps).map(|i| i as f64 * eps_step).collect();
    let profile = mc_privacy_profile(rho, d, r, &grid, n, seed)?;
    let at = profile
        .point_at_or_below(acct.eps_rho)
        .copied()
        .ok_or_else(|| Error::Degenerate("eps grid starts above the theorem epsilon".into()))?;
    let report = DominanceReport {
        rho,
        d,
        r,
        target_delta,
        delta_prime,
        eps_theorem: acct.eps_rho,
        delta_theorem: acct.delta_rho,
        eps_hat: profile.epsilon_at(target_delta),
        delta_hat_at_theorem: at.delta_hat,
        stderr_at_theorem: at.stderr,
        dominated: at.delta_hat <= target_delta + 3.0 * at.stderr,
    };
    Ok((report, profile))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSweep {
    pub reports: Vec<DominanceReport>,
    #[serde(skip)]
    pub profiles: Vec<PrivacyProfile>,
    /// `ε̂` per rank, infinity where the grid never reached the target δ.
    pub eps_hat: Vec<f64>,
    /// The raw `ε̂` sequence changes direction (grid noise included).
    pub non_monotone: bool,
    /// Some smaller rank needs significantly more ε than a larger one.
    pub significant_decrease: bool,
    /// Some larger rank needs significantly more ε than a smaller one.
    pub significant_increase: bool,
}

impl ProfileSweep {
    /// Non-monotone beyond Monte Carlo noise: both a significant decrease and a
    /// significant increase in `ε̂` along the rank list.
    pub fn significantly_non_monotone(&self) -> bool {
        self.significant_decrease && self.significant_increase
    }
}

/// `profile` at `eps` exceeds `target + 3·stderr`, so `eps` is too small for it.
fn needs_more(profile: &PrivacyProfile, eps: f64, target: f64) -> bool {
    eps.is_finite()
        && profile
            .point_at_or_below(eps + 1e-12)
            .is_some_and(|p| p.delta_hat > target + 3.0 * p.stderr)
}

/// [`dominance_check`] for each rank, rank `k` of the list on `seed.substream(k)`.
pub fn profile_sweep(rho: f64, d: usize, ranks: &[usize], target_delta: f64, n: usize, eps_step: f64, seed: Seed) -> Result<ProfileSweep> {
    if ranks.is_empty() {
        return domain("no ranks given");
    }
    let mut reports = Vec::with_capacity(ranks.len());
    let mut profiles = Vec::with_capacity(ranks.len());
    for (k, &r) in ranks.iter().enumerate() {
        let (rep, prof) = dominance_check(rho, d, r, target_delta, n, eps_step, seed.substream(k as u64))?;
        reports.push(rep);
        profiles.push(prof);
    }
    let eps_hat: Vec<f64> = reports.iter().map(|r| r.eps_hat.unwrap_or(f64::INFINITY)).collect();
    let mut significant_decrease = false;
    let mut significant_increase = false;
    for i in 0..ranks.len() {
        for j in i + 1..ranks.len() {
            significant_decrease |= needs_more(&profiles[i], eps_hat[j], target_delta);
            significant_increase |= needs_more(&profiles[j], eps_hat[i], target_delta);
        }
    }
    Ok(ProfileSweep {
        non_monotone: is_non_monotone(&eps_hat),
        significant_decrease,
        significant_increase,
        reports,
        profiles,
        eps_hat,
    })
}

/// True when the sequence is neither nonincreasing nor nondecreasing.
pub fn is_non_monotone(xs: &[f64]) -> bool {
    let up = xs.windows(2).any(|w| w[1] > w[0]);
    let down = xs.windows(2).any(|w| w[1] < w[0]);
    up && down
}
