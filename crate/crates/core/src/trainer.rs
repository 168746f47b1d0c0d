//! Desk-scale training loops on synthetic convex tasks: randomly projected GD,
//! LoRA with a frozen down-projection (LoRA-FA), its DP variant with
//! per-example clipping, and the clipped noisy-projection step.
//!
//! Weights are `n × d` matrices (`n` outputs, `d` features); gradients are
//! right-multiplied by projections, so `M` acts on the feature side.

use crate::accountants::{account_small_r, compose_basic, compose_gaussian_steps, jl_clip_zeta, SmallRReport};
use crate::error::{domain, Error, Result};
use crate::mechanisms::{
    clip_frobenius, gaussian_sigma, mechanism_draw, noisy_mech_with_draw, ConstantConvention, MechanismInput,
    NoisyMechParams, Variant,
};
use crate::randmat::{fill_gaussian, std_normal, wishart_from_rng, Matrix, Seed, Vector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskKind {
    Ridge,
    Logistic,
}

/// A synthetic supervised task: rows of `x` are examples.
///
/// Ridge: squared error `½(w·x − y)²`. Logistic: cross-entropy with labels
/// stored as class indices in `y`. Both add `(λ/2)‖W‖²_F` to the mean loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTask {
    pub kind: TaskKind,
    pub n_features: usize,
    pub n_classes: usize,
    pub x: Matrix,
    pub y: Vec<f64>,
    pub lambda: f64,
}

/// Parameters of the synthetic task generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_examples: usize,
    pub n_features: usize,
    /// Ignored for ridge.
    pub n_classes: usize,
    /// Ridge: label noise sd. Logistic: softmax temperature on the true logits
    /// (0 gives argmax labels).
    pub noise: f64,
    pub lambda: f64,
    /// Leading feature coordinates carrying the signal, scaled by `spike_scale`.
    /// Zero means isotropic features and a dense ground truth.
    pub spike_dims: usize,
    pub spike_scale: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Ridge,
            n_examples: 500,
            n_features: 32,
            n_classes: 1,
            noise: 0.1,
            lambda: 1e-3,
            spike_dims: 4,
            spike_scale: 3.0,
            seed: 0,
        }
    }
}

impl TaskSpec {
    /// Consumes the task keys it knows from `map`.
    pub fn from_map(map: &mut BTreeMap<String, String>) -> Result<Self> {
        let mut spec = Self::default();
        let keys: Vec<String> = map.keys().cloned().collect();
        for key in keys {
            let v = map[&key].clone();
            match key.as_str() {
                "task" | "kind" => {
                    spec.kind = match v.to_ascii_lowercase().as_str() {
                        "ridge" => TaskKind::Ridge,
                        "logistic" => TaskKind::Logistic,
                        _ => return Err(Error::Config(format!("unknown task kind {v:?}"))),
                    }
                }
                "n_examples" => spec.n_examples = parse_num(&key, &v)?,
                "n_features" => spec.n_features = parse_num(&key, &v)?,
                "n_classes" => spec.n_classes = parse_num(&key, &v)?,
                "noise" => spec.noise = parse_num(&key, &v)?,
                "lambda" => spec.lambda = parse_num(&key, &v)?,
                "spike_dims" => spec.spike_dims = parse_num(&key, &v)?,
                "spike_scale" => spec.spike_scale = parse_num(&key, &v)?,
                "task_seed" => spec.seed = parse_num(&key, &v)?,
                _ => continue,
            }
            map.remove(&key);
        }
        if spec.kind == TaskKind::Ridge {
            spec.n_classes = 1;
        }
        Ok(spec)
    }

    pub fn build(&self) -> Result<TrainTask> {
        let d = self.n_features;
        if self.n_examples == 0 || d == 0 {
            return domain("task needs at least one example and one feature");
        }
        if self.spike_dims > d {
            return domain(format!("spike_dims = {} exceeds n_features = {d}", self.spike_dims));
        }
        let mut rng = Seed::new(self.seed).rng();
        let scale = |j: usize| if j < self.spike_dims { self.spike_scale } else { 1.0 };
        let x = Matrix::from_fn(self.n_examples, d, |_, j| scale(j) * std_normal(&mut rng));
        let support = if self.spike_dims == 0 { d } else { self.spike_dims };
        match self.kind {
            TaskKind::Ridge => {
                let w = Vector::from_fn(d, |j, _| {
                    if j < support {
                        std_normal(&mut rng) / (support as f64).sqrt()
                    } else {
                        0.0
                    }
                });
                let y = (0..self.n_examples)
                    .map(|i| x.row(i).transpose().dot(&w) + self.noise * std_normal(&mut rng))
                    .collect();
                TrainTask::new(TaskKind::Ridge, x, y, 1, self.lambda)
            }
            TaskKind::Logistic => {
                let c = self.n_classes;
                if c < 2 {
                    return domain("logistic task needs at least 2 classes");
                }
                let w = Matrix::from_fn(c, d, |_, j| {
                    if j < support {
                        std_normal(&mut rng) / (support as f64).sqrt() / scale(j)
                    } else {
                        0.0
                    }
                });
                let mut y = Vec::with_capacity(self.n_examples);
                for i in 0..self.n_examples {
                    let z = &w * x.row(i).transpose();
                    let label = if self.noise > 0.0 {
                        sample_softmax(&mut rng, &(z * (1.0 / self.noise)))
                    } else {
                        z.argmax().0
                    };
                    y.push(label as f64);
                }
                TrainTask::new(TaskKind::Logistic, x, y, c, self.lambda)
            }
        }
    }
}

fn sample_softmax<R: Rng + ?Sized>(rng: &mut R, z: &Vector) -> usize {
    let p = softmax(z);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    p.len() - 1
}

fn softmax(z: &Vector) -> Vector {
    let m = z.max();
    let e = z.map(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

fn log_sum_exp(z: &Vector) -> f64 {
    let m = z.max();
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl TrainTask {
    pub fn new(kind: TaskKind, x: Matrix, y: Vec<f64>, n_classes: usize, lambda: f64) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Shape(format!("{} feature rows but {} labels", x.nrows(), y.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return domain("features must be finite");
        }
        if !(lambda >= 0.0) {
            return domain(format!("lambda must be nonnegative, got {lambda}"));
        }
        match kind {
            TaskKind::Ridge => {
                if y.iter().any(|v| !v.is_finite()) {
                    return domain("ridge targets must be finite");
                }
            }
            TaskKind::Logistic => {
                if n_classes < 2 {
                    return domain("logistic task needs at least 2 classes");
                }
                if y.iter().any(|&v| v < 0.0 || v.fract() != 0.0 || v as usize >= n_classes) {
                    return domain("logistic labels must be class indices");
                }
            }
        }
        Ok(Self {
            kind,
            n_features: x.ncols(),
            n_classes: if kind == TaskKind::Ridge { 1 } else { n_classes },
            x,
            y,
            lambda,
        })
    }

    pub fn n_examples(&self) -> usize {
        self.x.nrows()
    }

    /// Number of weight rows.
    pub fn n_outputs(&self) -> usize {
        self.n_classes
    }

    pub fn zero_weights(&self) -> Matrix {
        Matrix::zeros(self.n_outputs(), self.n_features)
    }

    /// The same task with one extra example appended.
    pub fn with_example(&self, x: &Vector, y: f64) -> Result<Self> {
        if x.len() != self.n_features {
            return Err(Error::Shape(format!("example has {} features, task has {}", x.len(), self.n_features)));
        }
        let n = self.n_examples();
        let mut xs = self.x.clone().insert_row(n, 0.0);
        xs.set_row(n, &x.transpose());
        let mut ys = self.y.clone();
        ys.push(y);
        Self::new(self.kind, xs, ys, self.n_classes, self.lambda)
    }

    fn check_w(&self, w: &Matrix) -> Result<()> {
        if w.shape() != (self.n_outputs(), self.n_features) {
            return Err(Error::Shape(format!(
                "weights are {:?}, task expects {:?}",
                w.shape(),
                (self.n_outputs(), self.n_features)
            )));
        }
        Ok(())
    }

    /// Unregularized loss of one example.
    pub fn example_loss(&self, w: &Matrix, x: &Vector, y: f64) -> f64 {
        let z = w * x;
        match self.kind {
            TaskKind::Ridge => 0.5 * (z[0] - y).powi(2),
            TaskKind::Logistic => log_sum_exp(&z) - z[y as usize],
        }
    }

    /// Unregularized gradient of one example's loss with respect to `W`.
    pub fn example_grad(&self, w: &Matrix, i: usize) -> Matrix {
        let x = self.x.row(i).transpose();
        let z = w * &x;
        let coef = match self.kind {
            TaskKind::Ridge => Vector::from_element(1, z[0] - self.y[i]),
            TaskKind::Logistic => {
                let mut p = softmax(&z);
                p[self.y[i] as usize] -= 1.0;
                p
            }
        };
        coef * x.transpose()
    }

    /// Mean loss plus the ridge penalty.
    pub fn loss(&self, w: &Matrix) -> Result<f64> {
        self.check_w(w)?;
        let n = self.n_examples() as f64;
        let data: f64 = (0..self.n_examples())
            .map(|i| self.example_loss(w, &self.x.row(i).transpose(), self.y[i]))
            .sum();
        Ok(data / n + 0.5 * self.lambda * w.norm_squared())
    }

    /// Gradient of [`TrainTask::loss`].
    pub fn grad(&self, w: &Matrix) -> Result<Matrix> {
        self.check_w(w)?;
        let n = self.n_examples() as f64;
        let z = w * self.x.transpose();
        let coef = match self.kind {
            TaskKind::Ridge => {
                let mut c = z;
                for i in 0..self.n_examples() {
                    c[(0, i)] -= self.y[i];
                }
                c
            }
            TaskKind::Logistic => {
                let mut c = z;
                for i in 0..self.n_examples() {
                    let p = softmax(&c.column(i).into_owned());
                    c.set_column(i, &p);
                    c[(self.y[i] as usize, i)] -= 1.0;
                }
                c
            }
        };
        Ok(coef * &self.x / n + w * self.lambda)
    }

    /// Minimizer of the ridge objective, used as a utility yardstick.
    pub fn ridge_optimum(&self) -> Result<Matrix> {
        if self.kind != TaskKind::Ridge {
            return domain("closed-form optimum exists only for ridge tasks");
        }
        let n = self.n_examples() as f64;
        let d = self.n_features;
        let h = self.x.transpose() * &self.x / n + Matrix::identity(d, d) * self.lambda;
        let b = self.x.transpose() * Vector::from_vec(self.y.clone()) / n;
        let sol = h
            .cholesky()
            .ok_or_else(|| Error::Degenerate("ridge normal equations are singular".into()))?
            .solve(&b);
        Ok(Matrix::from_row_slice(1, d, sol.as_slice()))
    }
}

/// LoRA factors with the down-projection `LoraA` frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraState {
    pub w0: Matrix,
    pub lora_b: Matrix,
    pub lora_a: Matrix,
    pub step: usize,
}

impl LoraState {
    /// `B = 0` and `A` with i.i.d. N(0, 1/r) entries.
    pub fn init(w0: Matrix, r: usize, seed: Seed) -> Result<Self> {
        if r == 0 {
            return domain("LoRA rank must be positive");
        }
        let a = sample_lora_a(r, w0.ncols(), seed);
        Ok(Self {
            lora_b: Matrix::zeros(w0.nrows(), r),
            w0,
            lora_a: a,
            step: 0,
        })
    }

    pub fn r(&self) -> usize {
        self.lora_a.nrows()
    }

    /// `W0 + B A`.
    pub fn effective(&self) -> Matrix {
        &self.w0 + &self.lora_b * &self.lora_a
    }
}

/// `A` drawn as the transpose of the factor [`mechanism_draw`] produces for the same seed.
fn sample_lora_a(r: usize, d: usize, seed: Seed) -> Matrix {
    let params = proj_params(r, 0.0, None);
    mechanism_draw(d, &params, seed).z().transpose()
}

fn proj_params(r: usize, sigma: f64, clip: Option<f64>) -> NoisyMechParams {
    NoisyMechParams {
        variant: if sigma > 0.0 { Variant::M2 } else { Variant::NoiseFree },
        r,
        entry_var: 1.0 / r as f64,
        sigma_g: sigma,
        clip_beta: clip,
    }
}

/// `B ← B − η ∇_W A ᵀ`.
pub fn lora_fa_step(state: &LoraState, grad_w: &Matrix, eta: f64) -> Result<LoraState> {
    if grad_w.shape() != state.w0.shape() {
        return Err(Error::Shape(format!(
            "gradient is {:?}, weights are {:?}",
            grad_w.shape(),
            state.w0.shape()
        )));
    }
    let mut next = state.clone();
    next.lora_b -= grad_w * state.lora_a.transpose() * eta;
    next.step += 1;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrainMechanism {
    DpLoraFa,
    NoisyProj,
    RpGd,
    NoiseFreeLora,
}

impl FromStr for TrainMechanism {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "dp_lora_fa" => Ok(Self::DpLoraFa),
            "noisy_proj" => Ok(Self::NoisyProj),
            "rp_gd" => Ok(Self::RpGd),
            "noise_free_lora" => Ok(Self::NoiseFreeLora),
            _ => Err(Error::Config(format!("unknown mechanism {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Batch {
    Full,
    /// Expected minibatch size `B_mb`; examples are kept with probability `B_mb/N`.
    Poisson(usize),
}

/// How the noisy-projection step clips before adding noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClipMode {
    /// Clip the full-batch gradient, then add noise: `(clip(G) + σ′E′) AᵀA`.
    #[default]
    Batch,
    /// Clip each example, sum, add noise and step with `η/N`:
    /// `(η/N) (Σ clip(g_i) + σ′E′) AᵀA`.
    PerExample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpTrainConfig {
    pub steps: usize,
    pub eta: f64,
    pub batch: Batch,
    /// `β` (or `β′`); infinity disables clipping.
    pub clip: f64,
    pub sigma: Option<f64>,
    pub eps_target: Option<f64>,
    pub delta_target: Option<f64>,
    pub mechanism: TrainMechanism,
    pub r: usize,
    /// Draw a fresh `A` (and hence `M`) every step.
    pub resample_a: bool,
    /// Capture level `α`; unset means `α = 1`, which makes `δ_M = 0`.
    pub alpha: Option<f64>,
    /// `ε` at which noisy-projection steps report `δ`.
    pub report_eps: f64,
    pub convention: ConstantConvention,
    pub clip_mode: ClipMode,
}

impl Default for DpTrainConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            eta: 0.02,
            batch: Batch::Full,
            clip: 1.0,
            sigma: None,
            eps_target: None,
            delta_target: None,
            mechanism: TrainMechanism::DpLoraFa,
            r: 8,
            resample_a: false,
            alpha: None,
            report_eps: 1.0,
            convention: ConstantConvention::Algorithm,
            clip_mode: ClipMode::Batch,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| Error::Config(format!("bad value {v:?} for key {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {v:?} for key {key}"))),
    }
}

fn opt_f64(key: &str, v: &str) -> Result<Option<f64>> {
    if v.eq_ignore_ascii_case("none") || v.is_empty() {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}

/// Parses `key = value` lines; `#` starts a comment. Duplicate keys are an error.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .or_else(|| line.split_once(':'))
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
        let key = k.trim().to_ascii_lowercase().replace('-', "_");
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {key}", no + 1)));
        }
    }
    Ok(out)
}

impl DpTrainConfig {
    /// Consumes the keys it knows from `map`.
    pub fn from_map(map: &mut BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        let keys: Vec<String> = map.keys().cloned().collect();
        for key in keys {
            let v = map[&key].clone();
            let known = match key.as_str() {
                "steps" | "t" => {
                    cfg.steps = parse_num(&key, &v)?;
                    true
                }
                "eta" => {
                    cfg.eta = parse_num(&key, &v)?;
                    true
                }
                "batch" => {
                    cfg.batch = if v.eq_ignore_ascii_case("full") {
                        Batch::Full
                    } else {
                        Batch::Poisson(parse_num(&key, &v)?)
                    };
                    true
                }
                "clip" | "beta" => {
                    cfg.clip = if v.eq_ignore_ascii_case("inf") { f64::INFINITY } else { parse_num(&key, &v)? };
                    true
                }
                "sigma" => {
                    cfg.sigma = opt_f64(&key, &v)?;
                    true
                }
                "eps_target" | "eps" => {
                    cfg.eps_target = opt_f64(&key, &v)?;
                    true
                }
                "delta_target" | "delta" => {
                    cfg.delta_target = opt_f64(&key, &v)?;
                    true
                }
                "mechanism" => {
                    cfg.mechanism = v.parse()?;
                    true
                }
                "r" | "rank" => {
                    cfg.r = parse_num(&key, &v)?;
                    true
                }
                "resample_a" => {
                    cfg.resample_a = parse_bool(&key, &v)?;
                    true
                }
                "alpha" => {
                    cfg.alpha = opt_f64(&key, &v)?;
                    true
                }
                "report_eps" => {
                    cfg.report_eps = parse_num(&key, &v)?;
                    true
                }
                "convention" => {
                    cfg.convention = match v.to_ascii_lowercase().as_str() {
                        "lemma" => ConstantConvention::Lemma,
                        "algorithm" => ConstantConvention::Algorithm,
                        _ => return Err(Error::Config(format!("unknown convention {v:?}"))),
                    };
                    true
                }
                "clip_mode" => {
                    cfg.clip_mode = match v.to_ascii_lowercase().replace('-', "_").as_str() {
                        "batch" => ClipMode::Batch,
                        "per_example" => ClipMode::PerExample,
                        _ => return Err(Error::Config(format!("unknown clip mode {v:?}"))),
                    };
                    true
                }
                _ => false,
            };
            if known {
                map.remove(&key);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut map = parse_kv(text)?;
        let cfg = Self::from_map(&mut map)?;
        if let Some(k) = map.keys().next() {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma.is_some() && self.eps_target.is_some() {
            return Err(Error::Config(
                "set either sigma or eps_target, not both (one derives the other)".into(),
            ));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.clip >= 0.0) {
            return Err(Error::Config(format!("clip must be nonnegative, got {}", self.clip)));
        }
        if let Some(s) = self.sigma {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::Config(format!("sigma must be finite and nonnegative, got {s}")));
            }
        }
        if !(self.report_eps > 0.0) || !self.report_eps.is_finite() {
            return Err(Error::Config(format!("report_eps must be positive, got {}", self.report_eps)));
        }
        if self.r == 0 {
            return Err(Error::Config("rank r must be positive".into()));
        }
        if let Batch::Poisson(0) = self.batch {
            return Err(Error::Config("minibatch size must be positive".into()));
        }
        Ok(())
    }
}

/// Cumulative privacy spent, with the composition method spelled out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub eps: f64,
    pub delta: f64,
    pub method: String,
}

impl Budget {
    fn none() -> Self {
        Self {
            eps: 0.0,
            delta: 0.0,
            method: "none".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajPoint {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub eps_spent: f64,
    pub delta_spent: f64,
}

pub fn write_trajectory_csv<W: Write>(out: W, traj: &[TrajPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "loss", "grad_norm", "eps_spent", "delta_spent"])?;
    for p in traj {
        w.write_record([
            p.step.to_string(),
            p.loss.to_string(),
            p.grad_norm.to_string(),
            p.eps_spent.to_string(),
            p.delta_spent.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Indices kept by Poisson subsampling at rate `q`.
pub fn poisson_batch<R: Rng + ?Sized>(rng: &mut R, n: usize, q: f64) -> Vec<usize> {
    (0..n).filter(|_| rng.random::<f64>() < q).collect()
}

/// Non-private LoRA-FA gradient descent from `state` for `steps` full-batch steps.
pub fn lora_fa_train(task: &TrainTask, state: &LoraState, eta: f64, steps: usize) -> Result<(LoraState, Vec<TrajPoint>)> {
    let mut st = state.clone();
    let mut traj = Vec::with_capacity(steps);
    for t in 0..steps {
        let g = task.grad(&st.effective())?;
        st = lora_fa_step(&st, &g, eta)?;
        traj.push(TrajPoint {
            step: t + 1,
            loss: task.loss(&st.effective())?,
            grad_norm: g.norm(),
            eps_spent: 0.0,
            delta_spent: 0.0,
        });
    }
    Ok((st, traj))
}

/// Per-step Gaussian noise scale of DP-LoRA-FA and the per-step `(ε, δ)` it buys.
fn dp_lora_sigma(cfg: &DpTrainConfig) -> Result<(f64, Option<(f64, f64)>)> {
    match (cfg.sigma, cfg.eps_target, cfg.delta_target) {
        (Some(s), _, Some(delta)) if s > 0.0 && cfg.clip.is_finite() => {
            // invert σ = 2β√(c ln(1.25/δ))/ε
            let unit = gaussian_sigma(cfg.clip.max(f64::MIN_POSITIVE), 1.0, delta, cfg.convention)?.sigma;
            Ok((s, Some((unit / s, delta))))
        }
        (Some(s), _, _) => Ok((s, None)),
        (None, Some(eps), Some(delta)) => {
            if !cfg.clip.is_finite() || cfg.clip == 0.0 {
                return Err(Error::Config("calibrating sigma from a budget needs a finite positive clip".into()));
            }
            let s = gaussian_sigma(cfg.clip, eps, delta, cfg.convention)?.sigma;
            Ok((s, Some((eps, delta))))
        }
        (None, Some(_), None) => Err(Error::Config("eps_target needs delta_target".into())),
        (None, None, _) => Ok((0.0, None)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpRun {
    pub state: LoraState,
    pub budget: Budget,
    pub sigma: f64,
    pub trajectory: Vec<TrajPoint>,
}

/// DP-LoRA-FA: per-example clipping of `∇_B`, Gaussian noise `(σ/B_mb) E`,
/// `T` steps. The budget is the basic composition of the per-step guarantee;
/// no subsampling amplification is claimed.
///
/// With infinite clip and zero noise the full-batch path calls the same
/// gradient and update code as [`lora_fa_train`].
pub fn dp_lora_fa(task: &TrainTask, state: &LoraState, cfg: &DpTrainConfig, seed: Seed) -> Result<DpRun> {
    cfg.validate()?;
    if cfg.mechanism != TrainMechanism::DpLoraFa {
        return Err(Error::Config(format!("dp_lora_fa called with mechanism {:?}", cfg.mechanism)));
    }
    let (sigma, per_step) = dp_lora_sigma(cfg)?;
    let n = task.n_examples();
    let mut noise_rng = seed.substream(1).rng();
    let mut batch_rng = seed.substream(2).rng();
    let mut st = state.clone();
    let mut traj = Vec::with_capacity(cfg.steps);
    let (rows, r) = st.lora_b.shape();
    for t in 0..cfg.steps {
        let w = st.effective();
        let (b_mb, idx): (f64, Vec<usize>) = match cfg.batch {
            Batch::Full => (n as f64, (0..n).collect()),
            Batch::Poisson(m) => (m as f64, poisson_batch(&mut batch_rng, n, m as f64 / n as f64)),
        };
        let mut g_b = if !cfg.clip.is_finite() && matches!(cfg.batch, Batch::Full) {
            task.grad(&w)? * st.lora_a.transpose()
        } else {
            let mut acc = Matrix::zeros(rows, r);
            for &i in &idx {
                let gi = task.example_grad(&w, i) * st.lora_a.transpose();
                acc += clip_frobenius(&gi, cfg.clip);
            }
            acc / b_mb + task.lambda * &w * st.lora_a.transpose()
        };
        if sigma > 0.0 {
            g_b += fill_gaussian(&mut noise_rng, rows, r, sigma / b_mb);
        }
        st.lora_b -= &g_b * cfg.eta;
        st.step += 1;
        let (eps_spent, delta_spent) = match per_step {
            Some(b) => compose_basic(&[b], Some(t + 1))?,
            None if sigma == 0.0 => (f64::INFINITY, 0.0),
            None => (f64::NAN, f64::NAN),
        };
        traj.push(TrajPoint {
            step: t + 1,
            loss: task.loss(&st.effective())?,
            grad_norm: g_b.norm(),
            eps_spent,
            delta_spent,
        });
    }
    let budget = match per_step {
        Some(b) => {
            let (eps, delta) = compose_basic(&[b], Some(cfg.steps))?;
            Budget {
                eps,
                delta,
                method: "basic_composition".into(),
            }
        }
        None if sigma == 0.0 => Budget {
            eps: f64::INFINITY,
            delta: 0.0,
            method: "non_private".into(),
        },
        None => Budget {
            eps: f64::NAN,
            delta: f64::NAN,
            method: "unaccounted (set delta_target)".into(),
        },
    };
    Ok(DpRun {
        state: st,
        budget,
        sigma,
        trajectory: traj,
    })
}

fn noisy_proj_sigma(cfg: &DpTrainConfig) -> Result<f64> {
    match cfg.sigma {
        Some(s) => Ok(s),
        None => Err(Error::Config("noisy projection needs an explicit sigma".into())),
    }
}

/// One clipped noisy-projection update `(clip_{β′}(G) + σ′E′) AᵀA` applied to the
/// effective weights, together with its small-rank accounting.
///
/// The update is computed as the M2 mechanism on `Gᵀ` with the projection
/// from `seed.substream(0)` and noise from `seed.substream(1)`, the same
/// streams [`crate::mechanisms::noisy_mech`] uses. With `resample_a` the new
/// `A` is drawn from those streams; otherwise the state's `A` is used.
pub fn noisy_proj_step(task: &TrainTask, state: &LoraState, cfg: &DpTrainConfig, seed: Seed) -> Result<(LoraState, Option<SmallRReport>)> {
    cfg.validate()?;
    if cfg.mechanism != TrainMechanism::NoisyProj {
        return Err(Error::Config(format!("noisy_proj_step called with mechanism {:?}", cfg.mechanism)));
    }
    let sigma = noisy_proj_sigma(cfg)?;
    let d = task.n_features;
    let r = state.r();
    let w = state.effective();
    let params = proj_params(r, sigma, None);
    let draw = if cfg.resample_a {
        mechanism_draw(d, &params, seed)
    } else {
        crate::randmat::WishartDraw::from_factor(state.lora_a.transpose(), 1.0 / r as f64)?
    };
    let (v, eta) = match cfg.clip_mode {
        ClipMode::Batch => (clip_frobenius(&task.grad(&w)?, cfg.clip).transpose(), cfg.eta),
        ClipMode::PerExample => {
            let mut acc = Matrix::zeros(task.n_outputs(), d);
            for i in 0..task.n_examples() {
                acc += clip_frobenius(&task.example_grad(&w, i), cfg.clip);
            }
            let n = task.n_examples() as f64;
            // ridge penalty is data independent; folded in before projection
            acc += &w * (task.lambda * n);
            (acc.transpose(), cfg.eta / n)
        }
    };
    let out = noisy_mech_with_draw(&MechanismInput::matrix(v), &params, &draw, seed.substream(1))?;
    // the previous adapter is folded into W0 and B restarts at zero on the new A
    let mut next = state.clone();
    next.w0 = w - out.transpose() * eta;
    next.lora_a = draw.z().transpose();
    next.lora_b = Matrix::zeros(task.n_outputs(), r);
    next.step += 1;

    let report = if sigma > 0.0 && cfg.clip.is_finite() {
        Some(account_small_r(
            cfg.report_eps,
            2.0 * cfg.clip,
            task.n_outputs().min(d),
            d,
            r,
            sigma,
            cfg.alpha.unwrap_or(1.0),
        )?)
    } else {
        None
    };
    Ok((next, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyProjRun {
    pub state: LoraState,
    pub trajectory: Vec<TrajPoint>,
    pub per_step: Option<SmallRReport>,
    pub budget: Budget,
}

/// `T` noisy-projection steps; step `t` uses `seed.substream(t)`. The budget is
/// `T(ε, Σ μ_t) + T·δ_p` when `eps_target` and `alpha` are set.
pub fn noisy_proj_train(task: &TrainTask, state: &LoraState, cfg: &DpTrainConfig, seed: Seed) -> Result<NoisyProjRun> {
    let mut st = state.clone();
    let mut traj = Vec::with_capacity(cfg.steps);
    let mut mus = Vec::with_capacity(cfg.steps);
    let mut last = None;
    for t in 0..cfg.steps {
        let before = st.effective();
        let (next, rep) = noisy_proj_step(task, &st, cfg, seed.substream(t as u64))?;
        let moved = (&next.effective() - &before).norm();
        let (eps_spent, delta_spent) = match &rep {
            Some(rep) => {
                mus.push(rep.mu_bar);
                (rep.eps, compose_gaussian_steps(&mus, rep.eps, rep.delta_m)?)
            }
            None => (f64::NAN, f64::NAN),
        };
        last = rep;
        st = next;
        traj.push(TrajPoint {
            step: t + 1,
            loss: task.loss(&st.effective())?,
            grad_norm: moved / cfg.eta,
            eps_spent,
            delta_spent,
        });
    }
    let budget = match &last {
        Some(rep) => Budget {
            eps: rep.eps,
            delta: compose_gaussian_steps(&mus, rep.eps, rep.delta_m)?,
            method: "gaussian_tradeoff_sum".into(),
        },
        None => Budget::none(),
    };
    Ok(NoisyProjRun {
        state: st,
        trajectory: traj,
        per_step: last,
        budget,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GdRun {
    pub w: Matrix,
    pub trajectory: Vec<TrajPoint>,
}

/// `W ← W − η ∇L(W) M` with `M` a rank-r Wishart draw (entry variance `1/r`),
/// sampled once or redrawn every step.
pub fn rp_gd(task: &TrainTask, w0: &Matrix, eta: f64, steps: usize, r: usize, redraw_each_step: bool, seed: Seed) -> Result<GdRun> {
    if r == 0 {
        return domain("r must be positive");
    }
    let d = task.n_features;
    let mut rng = seed.rng();
    let mut draw = wishart_from_rng(&mut rng, d, r, 1.0 / r as f64);
    let mut w = w0.clone();
    let mut traj = Vec::with_capacity(steps);
    for t in 0..steps {
        if redraw_each_step && t > 0 {
            draw = wishart_from_rng(&mut rng, d, r, 1.0 / r as f64);
        }
        let g = task.grad(&w)?;
        let step = draw.apply(&g.transpose())?.transpose();
        w -= &step * eta;
        traj.push(TrajPoint {
            step: t + 1,
            loss: task.loss(&w)?,
            grad_norm: g.norm(),
            eps_spent: 0.0,
            delta_spent: 0.0,
        });
    }
    Ok(GdRun { w, trajectory: traj })
}

/// Plain gradient descent, the yardstick for [`rp_gd`].
pub fn plain_gd(task: &TrainTask, w0: &Matrix, eta: f64, steps: usize) -> Result<GdRun> {
    let mut w = w0.clone();
    let mut traj = Vec::with_capacity(steps);
    for t in 0..steps {
        let g = task.grad(&w)?;
        w -= &g * eta;
        traj.push(TrajPoint {
            step: t + 1,
            loss: task.loss(&w)?,
            grad_norm: g.norm(),
            eps_spent: 0.0,
            delta_spent: 0.0,
        });
    }
    Ok(GdRun { w, trajectory: traj })
}

/// Outcome of [`train`], whatever the mechanism.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub w: Matrix,
    pub trajectory: Vec<TrajPoint>,
    pub budget: Budget,
    pub sigma: f64,
}

/// Trains from `w0` with the mechanism named in `cfg`. LoRA modes start from
/// `B = 0` with `A` drawn from `seed.substream(0)`; the loop itself runs on
/// `seed.substream(1)`.
pub fn train(task: &TrainTask, w0: &Matrix, cfg: &DpTrainConfig, seed: Seed) -> Result<TrainRun> {
    cfg.validate()?;
    let init = || LoraState::init(w0.clone(), cfg.r, seed.substream(0));
    match cfg.mechanism {
        TrainMechanism::DpLoraFa => {
            let run = dp_lora_fa(task, &init()?, cfg, seed.substream(1))?;
            Ok(TrainRun {
                w: run.state.effective(),
                trajectory: run.trajectory,
                budget: run.budget,
                sigma: run.sigma,
            })
        }
        TrainMechanism::NoiseFreeLora => {
            let (st, trajectory) = lora_fa_train(task, &init()?, cfg.eta, cfg.steps)?;
            Ok(TrainRun {
                w: st.effective(),
                trajectory,
                budget: Budget {
                    eps: f64::INFINITY,
                    delta: 0.0,
                    method: "non_private".into(),
                },
                sigma: 0.0,
            })
        }
        TrainMechanism::NoisyProj => {
            let run = noisy_proj_train(task, &init()?, cfg, seed.substream(1))?;
            Ok(TrainRun {
                w: run.state.effective(),
                trajectory: run.trajectory,
                budget: run.budget,
                sigma: noisy_proj_sigma(cfg)?,
            })
        }
        TrainMechanism::RpGd => {
            let run = rp_gd(task, w0, cfg.eta, cfg.steps, cfg.r, cfg.resample_a, seed.substream(1))?;
            Ok(TrainRun {
                w: run.w,
                trajectory: run.trajectory,
                budget: Budget {
                    eps: f64::INFINITY,
                    delta: 0.0,
                    method: "non_private".into(),
                },
                sigma: 0.0,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipCompare {
    /// The simplification used when comparing the two mechanisms: `β′ = β`.
    pub beta_prime_equiv: f64,
    pub zeta: f64,
    pub lower: f64,
    pub upper: f64,
    pub vacuous: bool,
}

/// Interval `[β/√(1+ζ), β/√(1−ζ)]` relating a clip on `∇_B = ∇_W Aᵀ` to a clip on `∇_W`.
pub fn clip_compare(n: usize, r: usize, delta_jl: f64, beta: f64) -> Result<ClipCompare> {
    if !(beta > 0.0) {
        return domain(format!("beta must be positive, got {beta}"));
    }
    let z = jl_clip_zeta(n, r, delta_jl)?;
    let upper = if z.vacuous { f64::INFINITY } else { beta / (1.0 - z.zeta).sqrt() };
    Ok(ClipCompare {
        beta_prime_equiv: beta,
        zeta: z.zeta,
        lower: beta / (1.0 + z.zeta).sqrt(),
        upper,
        vacuous: z.vacuous,
    })
}
