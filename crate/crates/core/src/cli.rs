//! Command-line front end. JSON reports go to stdout, a one-line summary to
//! stderr, bulk data to `--out` CSV with a run manifest next to it.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 domain or
//! precondition error, 4 convergence failure, 1 I/O failure.

use crate::accountants::{
    account_large_r, account_small_r, account_vec, choose_alpha, gaussian_tradeoff, AlignmentSpec, JsonReport,
    LargeRInputs, SupportMc,
};
use crate::attacks::{separation_trial, MiaSetup};
use crate::error::{Error, Result};
use crate::mechanisms::{amplification_trials, gaussian_sigma, ConstantConvention};
use crate::profiler::{profile_sweep, write_profiles_csv, DEFAULT_SAMPLES};
use crate::randmat::{fill_gaussian, spectrum_trials, Seed};
use crate::specialfn::{
    chi2_cdf, chi2_quantile_with, log_gamma, normal_cdf, reg_inc_beta, student_t_cdf, student_t_quantile_with,
    QuantileOptions,
};
use crate::trainer::{parse_kv, train, write_trajectory_csv, ClipMode, DpTrainConfig, TaskSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "wishart-dp", version, about = "Privacy accounting and experiments for random Wishart projections")]
struct Cli {
    /// Worker threads for Monte Carlo and shadow models [default: all cores]
    #[arg(long, global = true, env = "WISHART_DP_THREADS")]
    threads: Option<usize>,

    /// Where to write the run manifest [default: next to --out, if given]
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(untagged)]
enum Command {
    /// (ε, δ) of the vector projection mechanism for a minimum alignment ρ
    AccountVec(AccountVecArgs),
    /// Small-rank (ε, δ) of a noisy matrix projection at capture level α
    AccountSmallR(AccountSmallRArgs),
    /// Large-rank (ε, δ) from the parallel/residual split
    AccountLargeR(AccountLargeRArgs),
    /// Capture level α satisfying both small-rank conditions
    ChooseAlpha(ChooseAlphaArgs),
    /// Monte Carlo privacy profile against the closed-form bound, per rank
    ProfileMc(ProfileMcArgs),
    /// Shared-direction alignment amplification trials
    Amplify(AmplifyArgs),
    /// Count collisions MV = MV' of the noise-free matrix mechanism
    Separate(SeparateArgs),
    /// Shadow-model membership inference on a synthetic logistic task
    Mia(MiaArgs),
    /// Train on a synthetic task from a key = value config
    Train(TrainArgs),
    /// Nonzero Wishart spectrum against its high-probability bounds
    Spectrum(SpectrumArgs),
    /// Kernel table and fast invariant checks
    Selftest(SelftestArgs),
}

#[derive(Debug, Args, Serialize)]
struct AccountVecArgs {
    /// Minimum alignment ρ of unit query outputs, in (0, 1]
    #[arg(long)]
    rho: f64,
    /// Ambient dimension
    #[arg(long)]
    d: usize,
    /// Projection rank
    #[arg(long)]
    r: usize,
    /// Quantile level δ′ of the Student-t and χ² tails, in (0, 1)
    #[arg(long)]
    delta_prime: f64,
    /// Monte Carlo samples for the support term
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    support_n: usize,
    /// Master seed of the support Monte Carlo
    #[arg(long)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct AccountSmallRArgs {
    /// Target ε
    #[arg(long)]
    eps: f64,
    /// Frobenius sensitivity ‖ΔV‖_F
    #[arg(long)]
    sens: f64,
    /// Rank of the neighbor difference ΔV
    #[arg(long)]
    s: usize,
    #[arg(long)]
    d: usize,
    #[arg(long)]
    r: usize,
    /// Gaussian noise standard deviation σ_G
    #[arg(long)]
    sigma: f64,
    /// Capture level α in (0, 1]
    #[arg(long)]
    alpha: f64,
}

#[derive(Debug, Args, Serialize)]
struct AccountLargeRArgs {
    #[arg(long)]
    d: usize,
    #[arg(long)]
    r: usize,
    /// Rank of the neighbor difference
    #[arg(long)]
    s: usize,
    /// Rank of the parallel block
    #[arg(long)]
    p: usize,
    /// Frobenius sensitivity Δ_v
    #[arg(long)]
    delta_v: f64,
    /// Gaussian noise σ_G
    #[arg(long)]
    sigma_g: f64,
    /// Wishart factor entry standard deviation σ_M
    #[arg(long)]
    sigma_m: f64,
    /// Failure probability β of the operator bound
    #[arg(long)]
    beta: f64,
    /// δ spent on the parallel Gaussian part
    #[arg(long)]
    delta_par: f64,
    /// Alignment of the residual components
    #[arg(long)]
    rho_perp: f64,
    /// δ′ for the residual vector accountant
    #[arg(long)]
    delta_prime_perp: f64,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    support_n: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct ChooseAlphaArgs {
    #[arg(long)]
    eps: f64,
    /// Gaussian privacy parameter μ = ‖ΔV‖²_F/σ²
    #[arg(long)]
    mu: f64,
    #[arg(long)]
    s: usize,
    #[arg(long)]
    d: usize,
    #[arg(long)]
    r: usize,
    /// Relative slack η of the Beta tail condition, in (0, 1)
    #[arg(long)]
    eta: f64,
}

#[derive(Debug, Args, Serialize)]
struct ProfileMcArgs {
    #[arg(long)]
    rho: f64,
    #[arg(long)]
    d: usize,
    /// Ranks to sweep, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    r: Vec<usize>,
    /// Target δ at which ε is read off
    #[arg(long)]
    delta: f64,
    /// Privacy-loss samples per rank
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    n: usize,
    /// Spacing of the ε grid
    #[arg(long, default_value_t = 0.001)]
    eps_step: f64,
    #[arg(long)]
    seed: u64,
    /// CSV of every profile: eps,delta_hat,stderr,n,rho,d,r,seed
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct AmplifyArgs {
    /// Alignment of the unit pair
    #[arg(long)]
    rho: f64,
    #[arg(long)]
    d: usize,
    /// Amplification scale γ
    #[arg(long)]
    gamma: f64,
    /// Failure probability δ of the gain bound
    #[arg(long)]
    delta: f64,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct SeparateArgs {
    /// Rows of V
    #[arg(long)]
    d: usize,
    /// Columns of V (records)
    #[arg(long)]
    n: usize,
    #[arg(long)]
    r: usize,
    /// Entry variance of Z [default: 1/r]
    #[arg(long)]
    entry_var: Option<f64>,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
enum ClipModeArg {
    Batch,
    PerExample,
}

#[derive(Debug, Args, Serialize)]
struct MiaArgs {
    #[arg(long, default_value_t = 20)]
    n_features: usize,
    #[arg(long, default_value_t = 200)]
    n_examples: usize,
    #[arg(long, default_value_t = 10)]
    n_classes: usize,
    #[arg(long, default_value_t = 10)]
    r: usize,
    /// Noise σ′ added before projection; 0 trains noise-free
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Frobenius clip β′ on the gradient
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    #[arg(long, value_enum, default_value_t = ClipModeArg::Batch)]
    clip_mode: ClipModeArg,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    /// Step size η
    #[arg(long, default_value_t = 0.5)]
    eta: f64,
    /// Shadow models per side (IN and OUT)
    #[arg(long, default_value_t = 200)]
    shadows: usize,
    /// Seed of the synthetic dataset
    #[arg(long, default_value_t = 0)]
    task_seed: u64,
    #[arg(long)]
    seed: u64,
    /// CSV of label,score (label 1 = IN)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    /// key = value file with task and training keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value overrides, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: u64,
    /// Trajectory CSV: step,loss,grad_norm,eps_spent,delta_spent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct SpectrumArgs {
    #[arg(long)]
    d: usize,
    #[arg(long)]
    r: usize,
    /// Deviation parameter t of the bound
    #[arg(long, default_value_t = 4.0)]
    t: f64,
    /// Entry variance of Z [default: 1/r]
    #[arg(long)]
    entry_var: Option<f64>,
    #[arg(long, default_value_t = 100)]
    draws: usize,
    #[arg(long)]
    seed: u64,
    /// CSV of draw,index,eigenvalue
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct SelftestArgs {
    /// Iteration cap handed to the quantile solvers
    #[arg(long, hide = true)]
    quantile_max_iter: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub params: Value,
    pub seed: Option<Seed>,
    pub tool_version: String,
    pub outputs: Vec<String>,
    pub argv: Vec<String>,
}

struct Outcome {
    report: Value,
    summary: String,
    outputs: Vec<PathBuf>,
    ok: bool,
}

impl Outcome {
    fn new(report: Value, summary: String) -> Self {
        Self {
            report,
            summary,
            outputs: Vec::new(),
            ok: true,
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn report_json<R: JsonReport>(r: &R) -> Value {
    r.to_json()
}

/// Parses `args` (program name first), runs one subcommand and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 2;
        }
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return 1;
        }
    };
    let result = pool.install(|| dispatch(&cli.cmd));
    match result {
        Ok(outcome) => {
            match serde_json::to_string_pretty(&outcome.report) {
                Ok(s) => println!("{s}"),
                Err(e) => {
                    eprintln!("error: {e}");
                    return 1;
                }
            }
            eprintln!("{}", outcome.summary);
            if let Err(e) = write_manifest(&cli, &argv, &outcome) {
                eprintln!("error: {e}");
                return exit_code(&e);
            }
            if outcome.ok {
                0
            } else {
                3
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Convergence(_) => 4,
        Error::Config(_) => 2,
        Error::Io(_) => 1,
        _ => 3,
    }
}

fn subcommand_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::AccountVec(_) => "account-vec",
        Command::AccountSmallR(_) => "account-small-r",
        Command::AccountLargeR(_) => "account-large-r",
        Command::ChooseAlpha(_) => "choose-alpha",
        Command::ProfileMc(_) => "profile-mc",
        Command::Amplify(_) => "amplify",
        Command::Separate(_) => "separate",
        Command::Mia(_) => "mia",
        Command::Train(_) => "train",
        Command::Spectrum(_) => "spectrum",
        Command::Selftest(_) => "selftest",
    }
}

fn seed_of(cmd: &Command) -> Option<u64> {
    match cmd {
        Command::AccountVec(a) => Some(a.seed),
        Command::AccountLargeR(a) => Some(a.seed),
        Command::ProfileMc(a) => Some(a.seed),
        Command::Amplify(a) => Some(a.seed),
        Command::Separate(a) => Some(a.seed),
        Command::Mia(a) => Some(a.seed),
        Command::Train(a) => Some(a.seed),
        Command::Spectrum(a) => Some(a.seed),
        _ => None,
    }
}

fn write_manifest(cli: &Cli, argv: &[OsString], outcome: &Outcome) -> Result<()> {
    let path = match (&cli.manifest, outcome.outputs.first()) {
        (Some(p), _) => p.clone(),
        (None, Some(out)) => {
            let mut s = out.clone().into_os_string();
            s.push(".manifest.json");
            PathBuf::from(s)
        }
        (None, None) => return Ok(()),
    };
    let manifest = RunManifest {
        subcommand: subcommand_name(&cli.cmd).to_string(),
        params: serde_json::to_value(&cli.cmd).unwrap_or(Value::Null),
        seed: seed_of(&cli.cmd).map(Seed::new),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        outputs: outcome.outputs.iter().map(|p| p.display().to_string()).collect(),
        // argv[0] varies with the install location; leave it out so reruns match
        argv: argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn dispatch(cmd: &Command) -> Result<Outcome> {
    match cmd {
        Command::AccountVec(a) => {
            let support = SupportMc {
                n: a.support_n,
                seed: Seed::new(a.seed),
            };
            let rep = account_vec(&AlignmentSpec::new(a.rho, a.d, a.r)?, a.delta_prime, support)?;
            let summary = format!("account-vec: eps = {:.6}, delta = {:.3e}", rep.eps_rho, rep.delta_rho);
            Ok(Outcome::new(report_json(&rep), summary))
        }
        Command::AccountSmallR(a) => {
            let rep = account_small_r(a.eps, a.sens, a.s, a.d, a.r, a.sigma, a.alpha)?;
            let summary = format!(
                "account-small-r: eps = {}, delta = {:.6e} (delta_E {:.3e}, delta_M {:.3e})",
                rep.eps, rep.delta_total, rep.delta_e, rep.delta_m
            );
            Ok(Outcome::new(report_json(&rep), summary))
        }
        Command::AccountLargeR(a) => {
            let inp = LargeRInputs {
                d: a.d,
                r: a.r,
                s: a.s,
                p: a.p,
                delta_v: a.delta_v,
                sigma_g: a.sigma_g,
                sigma_m: a.sigma_m,
                beta: a.beta,
                delta_par: a.delta_par,
                rho_perp: a.rho_perp,
                delta_prime_perp: a.delta_prime_perp,
            };
            let support = SupportMc {
                n: a.support_n,
                seed: Seed::new(a.seed),
            };
            let rep = account_large_r(&inp, support)?;
            let summary = format!("account-large-r: eps = {:.6}, delta = {:.3e}", rep.eps_total, rep.delta_total);
            Ok(Outcome::new(report_json(&rep), summary))
        }
        Command::ChooseAlpha(a) => {
            let rep = choose_alpha(a.eps, a.mu, a.s, a.d, a.r, a.eta)?;
            let summary = format!(
                "choose-alpha: alpha = {:.6}, delta_total = {:.6e} vs Gaussian {:.6e}",
                rep.alpha, rep.report.delta_total, rep.delta_gauss
            );
            Ok(Outcome::new(report_json(&rep), summary))
        }
        Command::ProfileMc(a) => {
            let sweep = profile_sweep(a.rho, a.d, &a.r, a.delta, a.n, a.eps_step, Seed::new(a.seed))?;
            let mut out = Outcome::new(
                json!({"kind": "profile_mc", "inputs": a, "per_rank": sweep.reports,
                       "eps_hat": sweep.eps_hat, "non_monotone": sweep.non_monotone,
                       "significantly_non_monotone": sweep.significantly_non_monotone(),
                       "significant_decrease": sweep.significant_decrease,
                       "significant_increase": sweep.significant_increase}),
                String::new(),
            );
            let lines: Vec<String> = sweep
                .reports
                .iter()
                .map(|r| {
                    format!(
                        "r={} eps_hat={} eps_theorem={:.4} {}",
                        r.r,
                        r.eps_hat.map_or("none".into(), |e| format!("{e:.3}")),
                        r.eps_theorem,
                        if r.dominated { "dominated" } else { "NOT dominated" }
                    )
                })
                .collect();
            out.summary = format!("profile-mc: {}", lines.join("; "));
            out.ok = sweep.reports.iter().all(|r| r.dominated);
            if let Some(path) = &a.out {
                write_profiles_csv(create(path)?, &sweep.profiles)?;
                out.outputs.push(path.clone());
            }
            Ok(out)
        }
        Command::Amplify(a) => {
            let rep = amplification_trials(a.rho, a.d, a.gamma, a.delta, a.trials, Seed::new(a.seed))?;
            let summary = format!(
                "amplify: {}/{} trials reached cosine {:.4} (gain {:.4})",
                rep.successes,
                rep.trials,
                rep.rho + rep.gain,
                rep.gain
            );
            Ok(Outcome::new(json!({"kind": "amplify", "result": rep}), summary))
        }
        Command::Separate(a) => {
            if a.d == 0 || a.n == 0 {
                return Err(Error::Domain("d and n must be positive".into()));
            }
            let base = Seed::new(a.seed);
            let mut rng = base.substream(0).rng();
            let v = fill_gaussian(&mut rng, a.d, a.n, 1.0);
            // neighbors differ in one record: replace the last column
            let mut vp = v.clone();
            let fresh = fill_gaussian(&mut rng, a.d, 1, 1.0);
            vp.set_column(a.n - 1, &fresh.column(0));
            let entry_var = a.entry_var.unwrap_or(1.0 / a.r.max(1) as f64);
            let rep = separation_trial(&v, &vp, a.r, entry_var, a.trials, base.substream(1))?;
            let summary = format!("separate: {} of {} draws had MV = MV'", rep.n_equal, rep.n_trials);
            Ok(Outcome::new(json!({"kind": "separate", "inputs": a, "result": rep}), summary))
        }
        Command::Mia(a) => {
            let setup = MiaSetup {
                n_features: a.n_features,
                n_examples: a.n_examples,
                n_classes: a.n_classes,
                r: a.r,
                sigma: a.sigma,
                clip: a.clip,
                steps: a.steps,
                eta: a.eta,
                clip_mode: match a.clip_mode {
                    ClipModeArg::Batch => ClipMode::Batch,
                    ClipModeArg::PerExample => ClipMode::PerExample,
                },
                shadows: a.shadows,
                task_seed: a.task_seed,
            };
            let (canary, res) = setup.run(Seed::new(a.seed))?;
            let summary = format!(
                "mia: auc = {:.4} (stderr {:.4}), balanced accuracy = {:.4}",
                res.auc, res.auc_stderr, res.balanced_acc
            );
            let mut out = Outcome::new(
                json!({"kind": "mia", "setup": setup, "canary": canary, "result": res.to_json()}),
                summary,
            );
            if let Some(path) = &a.out {
                res.write_csv(create(path)?)?;
                out.outputs.push(path.clone());
            }
            Ok(out)
        }
        Command::Train(a) => train_cmd(a),
        Command::Spectrum(a) => {
            let entry_var = a.entry_var.unwrap_or(1.0 / a.r.max(1) as f64);
            let rep = spectrum_trials(a.d, a.r, a.t, entry_var, a.draws, Seed::new(a.seed))?;
            let summary = format!(
                "spectrum: {}/{} draws inside [{:.4}, {:.4}]",
                rep.inside, rep.draws, rep.lower, rep.upper
            );
            let mut out = Outcome::new(json!({"kind": "spectrum", "result": rep}), summary);
            if let Some(path) = &a.out {
                let mut w = csv::Writer::from_writer(create(path)?);
                w.write_record(["draw", "index", "eigenvalue"])?;
                for (i, spec) in rep.spectra.iter().enumerate() {
                    for (j, e) in spec.iter().enumerate() {
                        w.write_record([i.to_string(), j.to_string(), e.to_string()])?;
                    }
                }
                w.flush()?;
                out.outputs.push(path.clone());
            }
            Ok(out)
        }
        Command::Selftest(a) => selftest(a),
    }
}

fn train_cmd(a: &TrainArgs) -> Result<Outcome> {
    let mut map = match &a.config {
        Some(p) => parse_kv(&std::fs::read_to_string(p)?)?,
        None => Default::default(),
    };
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        map.insert(k.trim().to_ascii_lowercase().replace('-', "_"), v.trim().to_string());
    }
    let spec = TaskSpec::from_map(&mut map)?;
    let cfg = DpTrainConfig::from_map(&mut map)?;
    if let Some(k) = map.keys().next() {
        return Err(Error::Config(format!("unknown config key {k:?}")));
    }
    let task = spec.build()?;
    let w0 = task.zero_weights();
    let init = task.loss(&w0)?;
    let run = train(&task, &w0, &cfg, Seed::new(a.seed))?;
    let fin = task.loss(&run.w)?;
    let summary = format!(
        "train: loss {init:.6} -> {fin:.6} over {} steps; budget eps = {}, delta = {} ({})",
        cfg.steps, run.budget.eps, run.budget.delta, run.budget.method
    );
    let mut out = Outcome::new(
        json!({"kind": "train", "task": spec, "config": cfg, "sigma": run.sigma,
               "initial_loss": init, "final_loss": fin, "budget": run.budget}),
        summary,
    );
    if let Some(path) = &a.out {
        write_trajectory_csv(create(path)?, &run.trajectory)?;
        out.outputs.push(path.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
struct KernelRow {
    name: String,
    value: f64,
    expected: f64,
    tol: f64,
    pass: bool,
}

fn row(name: &str, value: f64, expected: f64, tol: f64) -> KernelRow {
    KernelRow {
        name: name.to_string(),
        value,
        expected,
        tol,
        pass: (value - expected).abs() <= tol,
    }
}

/// The kernel table; quantiles use `opts` so a broken solver surfaces here.
fn kernel_table(opts: QuantileOptions) -> Result<Vec<KernelRow>> {
    let tq = |nu: f64, p: f64| student_t_quantile_with(nu, p, opts);
    let cq = |nu: f64, p: f64| chi2_quantile_with(nu, p, opts);
    let mut rows = vec![
        row("normal_cdf(0)", normal_cdf(0.0)?, 0.5, 1e-15),
        row("normal_cdf(40)", normal_cdf(40.0)?, 1.0, 1e-15),
        row("normal_cdf(1.959964)", normal_cdf(1.959964)?, 0.975, 1e-6),
        row("student_t_quantile(5, 0.5)", tq(5.0, 0.5)?, 0.0, 1e-12),
        row("student_t_quantile(1, 0.975)", tq(1.0, 0.975)?, 12.7062, 1e-3),
        row("student_t_quantile(2, 0.95)", tq(2.0, 0.95)?, 2.9200, 1e-3),
        row("chi2_quantile(2, 0.95)", cq(2.0, 0.95)?, -2.0 * 0.05f64.ln(), 1e-9),
        row("chi2_quantile(1, 0.6826894921)", cq(1.0, 0.6826894921)?, 1.0, 1e-6),
        row("chi2_quantile(10, 1e-12) in (0, 0.1)", cq(10.0, 1e-12)?, 0.05, 0.05),
        row("reg_inc_beta(1, 2.5, 4)", reg_inc_beta(1.0, 2.5, 4.0)?, 1.0, 1e-15),
        row("reg_inc_beta(0.5, 1, 1)", reg_inc_beta(0.5, 1.0, 1.0)?, 0.5, 1e-15),
        row("reg_inc_beta(0.25, 2, 3)", reg_inc_beta(0.25, 2.0, 3.0)?, 0.2617, 1e-4),
        row("log_gamma(1)", log_gamma(1.0)?, 0.0, 1e-14),
        row("log_gamma(0.5)", log_gamma(0.5)?, 0.5723649, 1e-7),
        row("log_gamma(5)", log_gamma(5.0)?, 3.1780538, 1e-7),
    ];
    // round trips
    for nu in [1.0, 2.0, 5.0, 50.0, 500.0] {
        for p in [1e-6, 0.01, 0.5, 0.99, 1.0 - 1e-6] {
            rows.push(row(
                &format!("student_t_cdf(quantile({nu}, {p}))"),
                student_t_cdf(nu, tq(nu, p)?)?,
                p,
                1e-9,
            ));
            rows.push(row(&format!("chi2_cdf(quantile({nu}, {p}))"), chi2_cdf(nu, cq(nu, p)?)?, p, 1e-9));
        }
    }
    let (a, b, x) = (2.5, 4.0, 0.3);
    rows.push(row(
        "beta symmetry I_x(a,b) + I_(1-x)(b,a)",
        reg_inc_beta(x, a, b)? + reg_inc_beta(1.0 - x, b, a)?,
        1.0,
        1e-13,
    ));
    rows.push(row(
        "log_gamma recurrence at 3.7",
        log_gamma(4.7)? - log_gamma(3.7)? - 3.7f64.ln(),
        0.0,
        1e-12,
    ));
    rows.push(row("gaussian_tradeoff(1, 4)", gaussian_tradeoff(1.0, 4.0), 0.7582696625428712, 1e-12));
    rows.push(row(
        "gaussian_sigma(1, 0.5, 1e-5)",
        gaussian_sigma(1.0, 0.5, 1e-5, ConstantConvention::Lemma)?.sigma,
        4.0 * (1.25e5f64).ln().sqrt(),
        1e-12,
    ));
    Ok(rows)
}

fn selftest(a: &SelftestArgs) -> Result<Outcome> {
    let mut opts = QuantileOptions::default();
    if let Some(n) = a.quantile_max_iter {
        opts.max_iter = n;
    }
    let rows = kernel_table(opts)?;
    let failed = rows.iter().filter(|r| !r.pass).count();
    let mut text = String::new();
    for r in &rows {
        text.push_str(&format!(
            "{:<48} {:>22.15e} {}\n",
            r.name,
            r.value,
            if r.pass { "pass" } else { "FAIL" }
        ));
    }
    text.push_str(&format!("selftest: {} checks, {} failed", rows.len(), failed));
    let mut out = Outcome::new(json!({"kind": "selftest", "rows": rows, "failed": failed}), text);
    out.ok = failed == 0;
    Ok(out)
}
