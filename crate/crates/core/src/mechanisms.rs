//! The randomized maps: noise-free projection, the noisy variants M1/M2, the
//! Gaussian mechanism baseline, Frobenius clipping and alignment amplification.

use crate::error::{domain, Error, Result};
use crate::randmat::{fill_gaussian, std_normal, wishart_from_rng, Matrix, Seed, Vector, WishartDraw};
use serde::{Deserialize, Serialize};

/// Query output `V` (d×n). For vector queries `n = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MechanismInput {
    pub v: Matrix,
    pub unit_normalized: bool,
}

impl MechanismInput {
    pub fn new(v: Matrix, unit_normalized: bool) -> Result<Self> {
        if unit_normalized && v.ncols() == 1 {
            let norm = v.norm();
            if (norm - 1.0).abs() > 1e-10 {
                return domain(format!("input flagged unit-normalized but has norm {norm}"));
            }
        }
        Ok(Self { v, unit_normalized })
    }

    /// A raw (not normalized) matrix input.
    pub fn matrix(v: Matrix) -> Self {
        Self {
            v,
            unit_normalized: false,
        }
    }

    /// A single-column input, normalized to unit length.
    pub fn unit_vector(v: &Vector) -> Result<Self> {
        let norm = v.norm();
        if !(norm > 0.0) {
            return Err(Error::Degenerate("cannot normalize a zero vector".into()));
        }
        let u = v / norm;
        Ok(Self {
            v: Matrix::from_column_slice(u.len(), 1, u.as_slice()),
            unit_normalized: true,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    NoiseFree,
    M1,
    M2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyMechParams {
    pub variant: Variant,
    pub r: usize,
    pub entry_var: f64,
    pub sigma_g: f64,
    pub clip_beta: Option<f64>,
}

impl NoisyMechParams {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::Config("projection rank r must be positive".into()));
        }
        if !(self.entry_var > 0.0) {
            return Err(Error::Config(format!("entry variance must be positive, got {}", self.entry_var)));
        }
        if !(self.sigma_g >= 0.0) || !self.sigma_g.is_finite() {
            return Err(Error::Config(format!("sigma_G must be finite and nonnegative, got {}", self.sigma_g)));
        }
        match self.variant {
            Variant::NoiseFree if self.sigma_g > 0.0 => Err(Error::Config(
                "NOISE_FREE variant with sigma_G > 0 is ambiguous; pick M1 or M2".into(),
            )),
            Variant::M1 | Variant::M2 if self.sigma_g <= 0.0 => Err(Error::Config(
                "noisy variants M1/M2 require sigma_G > 0".into(),
            )),
            _ => match self.clip_beta {
                Some(b) if !(b >= 0.0) => Err(Error::Config(format!("clip_beta must be nonnegative, got {b}"))),
                _ => Ok(()),
            },
        }
    }
}

/// `M · V`.
pub fn project(input: &MechanismInput, draw: &WishartDraw) -> Result<Matrix> {
    if input.v.nrows() != draw.d() {
        return domain(format!(
            "input has {} rows but the projection has dimension {}",
            input.v.nrows(),
            draw.d()
        ));
    }
    draw.apply(&input.v)
}

/// Scales `x` by `min(1, beta / ‖x‖_F)`. An infinite `beta` leaves `x` unchanged.
pub fn clip_frobenius(x: &Matrix, beta: f64) -> Matrix {
    let norm = x.norm();
    if norm > beta {
        x * (beta / norm)
    } else {
        x.clone()
    }
}

/// Noisy mechanism with a given projection and a separate noise seed.
///
/// M1 returns `M V + Ξ`, M2 returns `M (V + Ξ)`; `V` is clipped first when
/// `clip_beta` is set.
pub fn noisy_mech_with_draw(
    input: &MechanismInput,
    params: &NoisyMechParams,
    draw: &WishartDraw,
    noise_seed: Seed,
) -> Result<Matrix> {
    params.validate()?;
    if draw.r() != params.r {
        return Err(Error::Shape(format!("draw has rank {} but params ask for {}", draw.r(), params.r)));
    }
    let v = match params.clip_beta {
        Some(b) => clip_frobenius(&input.v, b),
        None => input.v.clone(),
    };
    let clipped = MechanismInput::matrix(v);
    match params.variant {
        Variant::NoiseFree => project(&clipped, draw),
        Variant::M1 => {
            let mut rng = noise_seed.rng();
            let xi = fill_gaussian(&mut rng, clipped.v.nrows(), clipped.v.ncols(), params.sigma_g);
            Ok(project(&clipped, draw)? + xi)
        }
        Variant::M2 => {
            let mut rng = noise_seed.rng();
            let xi = fill_gaussian(&mut rng, clipped.v.nrows(), clipped.v.ncols(), params.sigma_g);
            project(&MechanismInput::matrix(clipped.v + xi), draw)
        }
    }
}

/// Samples `M` from `seed.substream(0)` and the noise from `seed.substream(1)`.
pub fn noisy_mech(input: &MechanismInput, params: &NoisyMechParams, seed: Seed) -> Result<Matrix> {
    params.validate()?;
    let draw = mechanism_draw(input.v.nrows(), params, seed);
    noisy_mech_with_draw(input, params, &draw, seed.substream(1))
}

/// The projection [`noisy_mech`] uses for a given seed.
pub fn mechanism_draw(d: usize, params: &NoisyMechParams, seed: Seed) -> WishartDraw {
    let mut rng = seed.substream(0).rng();
    wishart_from_rng(&mut rng, d, params.r, params.entry_var)
}

/// `v + N(0, σ² I)`.
pub fn gaussian_mech(v: &Vector, sigma: f64, seed: Seed) -> Result<Vector> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return domain(format!("sigma must be positive and finite, got {sigma}"));
    }
    let mut rng = seed.rng();
    Ok(Vector::from_fn(v.len(), |i, _| v[i] + sigma * std_normal(&mut rng)))
}

/// Which constant to use in the Gaussian mechanism calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConstantConvention {
    /// `2Δ√(ln(1.25/δ))/ε`
    Lemma,
    /// `2Δ√(2 ln(1.25/δ))/ε`
    #[default]
    Algorithm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSigma {
    pub sigma: f64,
    pub convention: ConstantConvention,
    /// Set when `eps >= 1`, outside the range the calibration is stated for.
    pub out_of_range: bool,
}

pub fn gaussian_sigma(delta_sens: f64, eps: f64, delta: f64, convention: ConstantConvention) -> Result<GaussianSigma> {
    if !(delta_sens > 0.0) {
        return domain(format!("sensitivity must be positive, got {delta_sens}"));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return domain(format!("eps must be positive, got {eps}"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return domain(format!("delta must lie in (0, 1), got {delta}"));
    }
    let log_term = (1.25 / delta).ln();
    let inner = match convention {
        ConstantConvention::Lemma => log_term,
        ConstantConvention::Algorithm => 2.0 * log_term,
    };
    Ok(GaussianSigma {
        sigma: 2.0 * delta_sens * inner.sqrt() / eps,
        convention,
        out_of_range: eps >= 1.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplifyParams {
    pub gamma: f64,
    pub target_delta: f64,
}

fn random_unit<R: rand::Rng + ?Sized>(rng: &mut R, d: usize) -> Vector {
    loop {
        let z = Vector::from_fn(d, |_, _| std_normal(rng));
        let n = z.norm();
        if n > 0.0 {
            return z / n;
        }
    }
}

fn check_unit(v: &Vector) -> Result<()> {
    let n = v.norm();
    if (n - 1.0).abs() > 1e-8 {
        return domain(format!("amplification expects a unit vector, got norm {n}"));
    }
    Ok(())
}

/// `v + γ z/‖z‖` with a fresh `z ∼ N(0, I)`. Not renormalized.
pub fn amplify_alignment(v: &Vector, params: &AmplifyParams, seed: Seed) -> Result<Vector> {
    check_unit(v)?;
    if !(params.gamma >= 0.0) {
        return domain(format!("gamma must be nonnegative, got {}", params.gamma));
    }
    let mut rng = seed.rng();
    let u = random_unit(&mut rng, v.len());
    Ok(v + params.gamma * u)
}

/// Amplifies a neighbor pair with a shared direction, as an adversary-free
/// curator would when both datasets see the same internal randomness.
pub fn amplify_pair(v: &Vector, v_prime: &Vector, params: &AmplifyParams, seed: Seed) -> Result<(Vector, Vector)> {
    if v.len() != v_prime.len() {
        return Err(Error::Shape(format!("pair lengths differ: {} vs {}", v.len(), v_prime.len())));
    }
    let a = amplify_alignment(v, params, seed)?;
    let b = amplify_alignment(v_prime, params, seed)?;
    Ok((a, b))
}

fn amp_c(d: usize, delta: f64) -> f64 {
    ((2.0 / d as f64) * (8.0 / delta).ln()).sqrt()
}

/// Smallest `γ` strictly above which the amplification lemma applies.
pub fn amplification_threshold(rho: f64, d: usize, delta: f64) -> f64 {
    (1.0 - rho) / (1.0 + rho) * amp_c(d, delta)
}

/// Alignment gain `s` of the shared-noise amplification step.
pub fn amplification_gain(rho: f64, gamma: f64, d: usize, delta: f64) -> Result<f64> {
    if !(rho > -1.0 && rho <= 1.0) {
        return domain(format!("rho must lie in (-1, 1], got {rho}"));
    }
    if d == 0 {
        return domain("dimension d must be positive");
    }
    if !(delta > 0.0 && delta < 1.0) {
        return domain(format!("delta must lie in (0, 1), got {delta}"));
    }
    let c = amp_c(d, delta);
    let threshold = amplification_threshold(rho, d, delta);
    if !(gamma > threshold) {
        return Err(Error::Precondition(format!(
            "gamma = {gamma} must exceed the threshold {threshold}"
        )));
    }
    let s = ((1.0 - rho) * gamma * gamma - 4.0 * gamma * c) / (1.0 + gamma * gamma + 2.0 * gamma * c);
    if !(s > 0.0) {
        let needed = if rho < 1.0 { 4.0 * c / (1.0 - rho) } else { f64::INFINITY };
        return Err(Error::Precondition(format!(
            "gain s = {s} is not positive at gamma = {gamma}; a positive gain needs gamma > {needed}"
        )));
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplifyTrials {
    pub rho: f64,
    pub d: usize,
    pub gamma: f64,
    pub delta: f64,
    pub threshold: f64,
    pub gain: f64,
    pub trials: usize,
    /// Trials whose amplified cosine reached `ρ + gain`.
    pub successes: usize,
    pub min_cosine: f64,
    pub mean_cosine: f64,
}

/// Fixes a unit pair with inner product exactly `ρ` (from `seed.substream(0)`)
/// and amplifies it `trials` times, trial `i` on `seed.substream(i + 1)`.
pub fn amplification_trials(rho: f64, d: usize, gamma: f64, delta: f64, trials: usize, seed: Seed) -> Result<AmplifyTrials> {
    use rayon::prelude::*;
    let gain = amplification_gain(rho, gamma, d, delta)?;
    if d < 2 || trials == 0 {
        return domain("need d >= 2 and at least one trial");
    }
    let mut rng = seed.substream(0).rng();
    let v = random_unit(&mut rng, d);
    let w = loop {
        let u = random_unit(&mut rng, d);
        let perp = &u - &v * v.dot(&u);
        if perp.norm() > 1e-8 {
            break perp.normalize();
        }
    };
    let v_prime = (&v * rho + &w * (1.0 - rho * rho).max(0.0).sqrt()).normalize();
    let params = AmplifyParams {
        gamma,
        target_delta: delta,
    };
    let cos: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let (a, b) = amplify_pair(&v, &v_prime, &params, seed.substream(i as u64 + 1))?;
            Ok(a.dot(&b) / (a.norm() * b.norm()))
        })
        .collect::<Result<_>>()?;
    let target = rho + gain;
    Ok(AmplifyTrials {
        rho,
        d,
        gamma,
        delta,
        threshold: amplification_threshold(rho, d, delta),
        gain,
        trials,
        successes: cos.iter().filter(|&&c| c >= target).count(),
        min_cosine: cos.iter().copied().fold(f64::INFINITY, f64::min),
        mean_cosine: cos.iter().sum::<f64>() / trials as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::randmat::wishart_draw;

    fn col(v: &[f64]) -> Matrix {
        Matrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn project_examples() {
        let w = wishart_draw(5, 2, 0.5, Seed::new(1)).unwrap();
        let out = project(&MechanismInput::matrix(Matrix::zeros(5, 3)), &w).unwrap();
        assert_eq!(out, Matrix::zeros(5, 3));

        let w = WishartDraw::from_factor(col(&[1.0, 0.0]), 1.0).unwrap();
        let out = project(&MechanismInput::new(col(&[1.0, 0.0]), true).unwrap(), &w).unwrap();
        assert_eq!(out, col(&[1.0, 0.0]));

        assert!(project(&MechanismInput::matrix(Matrix::zeros(4, 1)), &w).is_err());
    }

    #[test]
    fn projection_is_unbiased() {
        let d = 64;
        let v = Vector::from_fn(d, |i, _| ((i + 1) as f64).sin());
        let v = &v / v.norm();
        let input = MechanismInput::unit_vector(&v).unwrap();
        let mut acc = Matrix::zeros(d, 1);
        let reps = 10_000;
        let mut rng = Seed::new(3).rng();
        for _ in 0..reps {
            let w = wishart_from_rng(&mut rng, d, d, 1.0 / d as f64);
            acc += project(&input, &w).unwrap();
        }
        acc /= reps as f64;
        let err = (acc - &input.v).norm();
        assert!(err <= 0.03, "relative error {err}");
    }

    #[test]
    fn m1_noise_only_covariance() {
        let params = NoisyMechParams {
            variant: Variant::M1,
            r: 2,
            entry_var: 0.5,
            sigma_g: 1.0,
            clip_beta: None,
        };
        let d = 3;
        let input = MechanismInput::matrix(Matrix::zeros(d, 1));
        let mut cov = Matrix::zeros(d, d);
        let reps = 100_000u64;
        for i in 0..reps {
            let y = noisy_mech(&input, &params, Seed::new(5).substream(i)).unwrap();
            cov += &y * y.transpose();
        }
        cov /= reps as f64;
        assert!((cov - Matrix::identity(d, d)).abs().max() < 0.05);
    }

    #[test]
    fn m2_conditional_covariance() {
        let params = NoisyMechParams {
            variant: Variant::M2,
            r: 2,
            entry_var: 0.5,
            sigma_g: 0.7,
            clip_beta: None,
        };
        let d = 3;
        let draw = wishart_draw(d, 2, 0.5, Seed::new(9)).unwrap();
        let input = MechanismInput::matrix(Matrix::zeros(d, 1));
        let mut cov = Matrix::zeros(d, d);
        let reps = 100_000u64;
        for i in 0..reps {
            let y = noisy_mech_with_draw(&input, &params, &draw, Seed::new(10).substream(i)).unwrap();
            cov += &y * y.transpose();
        }
        cov /= reps as f64;
        let m = draw.gram();
        let target = m * m * (0.7 * 0.7);
        let scale = target.abs().max();
        assert!((cov - &target).abs().max() <= 0.05 * scale);
    }

    #[test]
    fn clipping_contract() {
        let v = col(&[2.0, 0.0, 0.0]);
        assert!((clip_frobenius(&v, 1.0).norm() - 1.0).abs() < 1e-15);
        assert_eq!(clip_frobenius(&v, 5.0), v);
        assert_eq!(clip_frobenius(&v, f64::INFINITY), v);
        let params = NoisyMechParams {
            variant: Variant::NoiseFree,
            r: 3,
            entry_var: 1.0,
            sigma_g: 0.0,
            clip_beta: Some(1.0),
        };
        let draw = WishartDraw::from_factor(Matrix::identity(3, 3), 1.0).unwrap();
        let out = noisy_mech_with_draw(&MechanismInput::matrix(v), &params, &draw, Seed::new(0)).unwrap();
        assert!((out.norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn m1_marginal_mean() {
        let params = NoisyMechParams {
            variant: Variant::M1,
            r: 3,
            entry_var: 0.2,
            sigma_g: 0.5,
            clip_beta: None,
        };
        let v = col(&[1.0, -2.0, 0.5, 0.0]);
        let input = MechanismInput::matrix(v.clone());
        let reps = 50_000u64;
        let mut acc = Matrix::zeros(4, 1);
        for i in 0..reps {
            acc += noisy_mech(&input, &params, Seed::new(77).substream(i)).unwrap();
        }
        acc /= reps as f64;
        let target = v * (3.0 * 0.2);
        assert!((acc - &target).norm() <= 0.05 * target.norm());
    }

    #[test]
    fn config_errors() {
        let mut p = NoisyMechParams {
            variant: Variant::NoiseFree,
            r: 2,
            entry_var: 0.5,
            sigma_g: 1.0,
            clip_beta: None,
        };
        let input = MechanismInput::matrix(Matrix::zeros(3, 1));
        assert!(matches!(noisy_mech(&input, &p, Seed::new(0)), Err(Error::Config(_))));
        p.variant = Variant::M2;
        p.sigma_g = 0.0;
        assert!(matches!(noisy_mech(&input, &p, Seed::new(0)), Err(Error::Config(_))));
    }

    #[test]
    fn gaussian_mech_examples() {
        let v = Vector::from_vec(vec![1.0, -3.0]);
        let out = gaussian_mech(&v, 1e-12, Seed::new(1)).unwrap();
        assert!((out - &v).abs().max() < 1e-9);
        assert_eq!(gaussian_mech(&v, 2.0, Seed::new(4)).unwrap(), gaussian_mech(&v, 2.0, Seed::new(4)).unwrap());
        assert!(gaussian_mech(&v, 0.0, Seed::new(1)).is_err());
        let big = gaussian_mech(&Vector::zeros(1_000_000), 2.0, Seed::new(8)).unwrap();
        let var = big.iter().map(|x| x * x).sum::<f64>() / 1e6;
        assert!((var - 4.0).abs() < 0.2, "var {var}");
    }

    #[test]
    fn gaussian_sigma_examples() {
        let lemma = ConstantConvention::Lemma;
        let s = gaussian_sigma(1.0, 1.0, 1.25 / std::f64::consts::E, lemma).unwrap();
        assert!((s.sigma - 2.0).abs() < 1e-12);
        assert!(s.out_of_range);
        let s1 = gaussian_sigma(1.0, 1.0, 1e-5, lemma).unwrap().sigma;
        assert!((s1 - 2.0 * (125_000f64).ln().sqrt()).abs() < 1e-12);
        assert!((s1 - 6.8517).abs() < 2e-4);
        let s2 = gaussian_sigma(2.0, 0.5, 1e-5, lemma).unwrap().sigma;
        assert!((s2 - 4.0 * s1).abs() < 1e-10);
        assert!((s2 - 27.407).abs() < 1e-3, "{s2}");
        let alg = gaussian_sigma(1.0, 0.5, 1e-5, ConstantConvention::default()).unwrap();
        assert_eq!(alg.convention, ConstantConvention::Algorithm);
        assert!(!alg.out_of_range);
        assert!((alg.sigma - 2.0 * s1 * 2f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn amplify_examples() {
        let v = Vector::from_vec(vec![0.6, 0.8, 0.0]);
        let p0 = AmplifyParams { gamma: 0.0, target_delta: 0.01 };
        assert_eq!(amplify_alignment(&v, &p0, Seed::new(1)).unwrap(), v);
        let p = AmplifyParams { gamma: 0.3, target_delta: 0.01 };
        for i in 0..100 {
            let n = amplify_alignment(&v, &p, Seed::new(2).substream(i)).unwrap().norm();
            assert!((0.7 - 1e-12..=1.3 + 1e-12).contains(&n));
        }
        assert!(amplify_alignment(&(v * 2.0), &p, Seed::new(1)).is_err());
    }

    #[test]
    fn amplification_trials_hit_target() {
        let rep = amplification_trials(0.2, 500, 1.0, 0.01, 500, Seed::new(4)).unwrap();
        assert!(rep.successes as f64 >= 0.99 * rep.trials as f64, "{rep:?}");
        assert!(amplification_trials(0.2, 500, 0.01, 0.01, 10, Seed::new(4)).is_err());
    }

    #[test]
    fn gain_examples() {
        let s = amplification_gain(0.3, 2.0, 1_000_000_000_000, 0.01).unwrap();
        assert!((s - 0.7 * 4.0 / 5.0).abs() < 1e-4);
        assert!(matches!(amplification_gain(1.0, 1.0, 100, 0.01), Err(Error::Precondition(_))));
        let msg = amplification_gain(0.5, 1e-6, 100, 0.01).unwrap_err().to_string();
        let thr = amplification_threshold(0.5, 100, 0.01);
        assert!(msg.contains(&format!("{thr}")));

        let (rho, gamma, d, delta) = (0.0f64, 1.0f64, 1_000_000usize, 0.01f64);
        let log_term = (8.0f64 / delta).ln();
        let c = (2.0 * log_term / d as f64).sqrt();
        let num = (1.0 - rho) * gamma.powi(2) - 4.0 * gamma * c;
        let den = 1.0 + gamma.powi(2) + 2.0 * gamma * c;
        let s = amplification_gain(rho, gamma, d, delta).unwrap();
        assert!((s - num / den).abs() < 1e-15);
    }
}
