//! Separation of noise-free projections and a shadow-model membership
//! inference attack with a least-likely-class canary.

use crate::error::{domain, Error, Result};
use crate::randmat::{std_normal, wishart_from_rng, Matrix, Seed, Vector};
use crate::trainer::{train, ClipMode, DpTrainConfig, TaskKind, TaskSpec, TrainMechanism, TrainTask};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Relative tolerance of the zero test `‖M ΔV‖_F ≤ tol · ‖ΔV‖_F · ‖M‖_F`.
pub const SEPARATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationResult {
    pub n_trials: usize,
    pub n_equal: usize,
    /// Largest `‖M ΔV‖_F` seen.
    pub max_residual: f64,
    /// Smallest `‖M ΔV‖_F / (‖ΔV‖_F ‖M‖_F)` seen; the zero test compares this to the tolerance.
    pub min_relative_residual: f64,
}

/// Counts draws of `M = Z Zᵀ` for which `M V` and `M V′` coincide up to the
/// relative tolerance. Draw `i` uses `seed.substream(i)`.
pub fn separation_trial(v: &Matrix, v_prime: &Matrix, r: usize, entry_var: f64, n_trials: usize, seed: Seed) -> Result<SeparationResult> {
    if v.shape() != v_prime.shape() {
        return Err(Error::Shape(format!("V is {:?}, V' is {:?}", v.shape(), v_prime.shape())));
    }
    if r == 0 || !(entry_var > 0.0) {
        return domain("r and entry_var must be positive");
    }
    let dv = v - v_prime;
    let dv_norm = dv.norm();
    if dv_norm == 0.0 {
        return Err(Error::Degenerate("V and V' are equal; there is nothing to separate".into()));
    }
    let d = v.nrows();
    let per_trial: Vec<(f64, f64)> = (0..n_trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed.substream(i as u64).rng();
            let draw = wishart_from_rng(&mut rng, d, r, entry_var);
            let z = draw.z();
            let residual = (z * (z.transpose() * &dv)).norm();
            // ‖Z Zᵀ‖_F = ‖Zᵀ Z‖_F, the small side
            let m_norm = (z.transpose() * z).norm();
            (residual, residual / (dv_norm * m_norm))
        })
        .collect();
    let n_equal = per_trial.iter().filter(|(_, rel)| *rel <= SEPARATION_TOL).count();
    Ok(SeparationResult {
        n_trials,
        n_equal,
        max_residual: per_trial.iter().map(|p| p.0).fold(0.0, f64::max),
        min_relative_residual: per_trial.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Canary {
    pub x_q: Vec<f64>,
    pub y_q: usize,
    /// Master seed and stream of the reference model's training run.
    pub reference_seed: Seed,
}

/// Draws `x_q ~ N(0, I)` from `seed.substream(0)`, trains a reference model on
/// the task from `seed.substream(1)` and labels the canary with the class the
/// reference model scores lowest.
pub fn craft_canary(task: &TrainTask, cfg: &DpTrainConfig, seed: Seed) -> Result<Canary> {
    if task.kind != TaskKind::Logistic || task.n_classes < 2 {
        return domain("canary crafting needs a classification task with at least 2 classes");
    }
    let mut rng = seed.substream(0).rng();
    let x_q: Vec<f64> = (0..task.n_features).map(|_| std_normal(&mut rng)).collect();
    let reference_seed = seed.substream(1);
    let model = train(task, &task.zero_weights(), cfg, reference_seed)?;
    let logits = &model.w * Vector::from_column_slice(&x_q);
    Ok(Canary {
        x_q,
        y_q: least_likely(&logits),
        reference_seed,
    })
}

/// Index of the smallest score; ties go to the lowest index.
fn least_likely(scores: &Vector) -> usize {
    let mut best = 0;
    for k in 1..scores.len() {
        if scores[k] < scores[best] {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiaResult {
    pub scores_in: Vec<f64>,
    pub scores_out: Vec<f64>,
    pub auc: f64,
    /// Hanley-McNeil standard error of the AUC.
    pub auc_stderr: f64,
    pub balanced_acc: f64,
    pub threshold: f64,
}

impl MiaResult {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }

    /// Two columns `label,score`, label 1 for IN models.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["label", "score"])?;
        for s in &self.scores_in {
            w.write_record(["1".to_string(), s.to_string()])?;
        }
        for s in &self.scores_out {
            w.write_record(["0".to_string(), s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains `n_in` models on `D ∪ {canary}` and `n_out` on `D`, scoring each by
/// the canary's loss. Model `k` (IN first, then OUT) uses `seed.substream(k)`.
pub fn run_mia(task: &TrainTask, cfg: &DpTrainConfig, canary: &Canary, n_in: usize, n_out: usize, seed: Seed) -> Result<MiaResult> {
    if n_in < 2 || n_out < 2 {
        return domain(format!("need at least 2 IN and 2 OUT models, got {n_in} and {n_out}"));
    }
    if canary.y_q >= task.n_classes || canary.x_q.len() != task.n_features {
        return domain("canary does not fit the task");
    }
    let x_q = Vector::from_column_slice(&canary.x_q);
    let y_q = canary.y_q as f64;
    let with_canary = task.with_example(&x_q, y_q)?;
    let w0 = task.zero_weights();
    let scores = (0..n_in + n_out)
        .into_par_iter()
        .map(|k| {
            let data = if k < n_in { &with_canary } else { task };
            let run = train(data, &w0, cfg, seed.substream(k as u64))?;
            Ok(task.example_loss(&run.w, &x_q, y_q))
        })
        .collect::<Result<Vec<f64>>>()?;
    let (scores_in, scores_out) = (scores[..n_in].to_vec(), scores[n_in..].to_vec());
    let roc = roc_auc(&scores_in, &scores_out)?;
    Ok(MiaResult {
        auc_stderr: auc_stderr(roc.auc, n_in, n_out),
        scores_in,
        scores_out,
        auc: roc.auc,
        balanced_acc: roc.balanced_acc,
        threshold: roc.threshold,
    })
}

/// The desk-scale attack: a synthetic multinomial logistic task trained with
/// noisy projected gradient steps (`M` redrawn every step).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiaSetup {
    pub n_features: usize,
    pub n_examples: usize,
    pub n_classes: usize,
    pub r: usize,
    /// Noise added before projection; 0 trains noise-free.
    pub sigma: f64,
    /// Frobenius clip on the full-batch gradient.
    pub clip: f64,
    pub steps: usize,
    pub eta: f64,
    pub clip_mode: ClipMode,
    /// Shadow models per side.
    pub shadows: usize,
    pub task_seed: u64,
}

impl Default for MiaSetup {
    fn default() -> Self {
        Self {
            n_features: 20,
            n_examples: 200,
            n_classes: 10,
            r: 10,
            sigma: 0.0,
            clip: 1.0,
            steps: 100,
            eta: 0.5,
            clip_mode: ClipMode::Batch,
            shadows: 200,
            task_seed: 0,
        }
    }
}

impl MiaSetup {
    pub fn task(&self) -> Result<TrainTask> {
        TaskSpec {
            kind: TaskKind::Logistic,
            n_examples: self.n_examples,
            n_features: self.n_features,
            n_classes: self.n_classes,
            noise: 0.0,
            lambda: 1e-3,
            spike_dims: 0,
            spike_scale: 1.0,
            seed: self.task_seed,
        }
        .build()
    }

    pub fn config(&self) -> DpTrainConfig {
        DpTrainConfig {
            steps: self.steps,
            eta: self.eta,
            clip: self.clip,
            sigma: Some(self.sigma),
            mechanism: TrainMechanism::NoisyProj,
            r: self.r,
            resample_a: true,
            clip_mode: self.clip_mode,
            ..DpTrainConfig::default()
        }
    }

    /// Canary from `seed.substream(0)`, shadow models from `seed.substream(1)`.
    pub fn run(&self, seed: Seed) -> Result<(Canary, MiaResult)> {
        let task = self.task()?;
        let cfg = self.config();
        let canary = craft_canary(&task, &cfg, seed.substream(0))?;
        let res = run_mia(&task, &cfg, &canary, self.shadows, self.shadows, seed.substream(1))?;
        Ok((canary, res))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    pub auc: f64,
    pub balanced_acc: f64,
    pub threshold: f64,
}

/// AUC by pairwise comparison (lower score means member, ties count ½) and the
/// best balanced accuracy over thresholds at every unique score, predicting
/// "member" for scores `≤ threshold`.
pub fn roc_auc(scores_in: &[f64], scores_out: &[f64]) -> Result<Roc> {
    if scores_in.is_empty() || scores_out.is_empty() {
        return domain("both score lists must be nonempty");
    }
    if scores_in.iter().chain(scores_out).any(|s| s.is_nan()) {
        return domain("scores must not be NaN");
    }
    let mut out_sorted = scores_out.to_vec();
    out_sorted.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &s in scores_in {
        let below = out_sorted.partition_point(|&o| o < s);
        let at_or_below = out_sorted.partition_point(|&o| o <= s);
        // OUT scores strictly above s are wins, equal ones half
        wins += (out_sorted.len() - at_or_below) as f64 + 0.5 * (at_or_below - below) as f64;
    }
    let auc = wins / (scores_in.len() * scores_out.len()) as f64;

    let mut in_sorted = scores_in.to_vec();
    in_sorted.sort_by(f64::total_cmp);
    let mut uniq: Vec<f64> = in_sorted.iter().chain(&out_sorted).copied().collect();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    let (mut best, mut thr) = (f64::NEG_INFINITY, uniq[0]);
    for &t in &uniq {
        let tpr = in_sorted.partition_point(|&s| s <= t) as f64 / in_sorted.len() as f64;
        let tnr = 1.0 - out_sorted.partition_point(|&s| s <= t) as f64 / out_sorted.len() as f64;
        let bal = 0.5 * (tpr + tnr);
        if bal > best {
            best = bal;
            thr = t;
        }
    }
    Ok(Roc {
        auc,
        balanced_acc: best,
        threshold: thr,
    })
}

/// Hanley-McNeil standard error of an AUC estimate.
pub fn auc_stderr(auc: f64, n_in: usize, n_out: usize) -> f64 {
    let q1 = auc / (2.0 - auc);
    let q2 = 2.0 * auc * auc / (1.0 + auc);
    let (m, n) = (n_in as f64, n_out as f64);
    let var = (auc * (1.0 - auc) + (m - 1.0) * (q1 - auc * auc) + (n - 1.0) * (q2 - auc * auc)) / (m * n);
    var.max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{TaskSpec, TrainMechanism};
    use proptest::prelude::*;

    #[test]
    fn separation_never_collides() {
        let mut rng = Seed::new(3).rng();
        let v = Matrix::from_fn(8, 3, |_, _| std_normal(&mut rng));
        let mut vp = v.clone();
        vp[(2, 1)] += 0.5;
        let res = separation_trial(&v, &vp, 2, 0.5, 10_000, Seed::new(7)).unwrap();
        assert_eq!(res.n_equal, 0);
        assert_eq!(res.n_trials, 10_000);
        assert!(res.max_residual > 0.0);
    }

    #[test]
    fn separation_rank_one_small_case() {
        // d = 2, r = 1: the zero test reduces to zᵀu = 0 for the unit direction u
        let v = Matrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let vp = Matrix::from_column_slice(2, 1, &[0.4, 2.8]);
        let res = separation_trial(&v, &vp, 1, 1.0, 10_000, Seed::new(1)).unwrap();
        assert_eq!(res.n_equal, 0);
        let u = (&v - &vp).normalize();
        for i in 0..200 {
            let mut rng = Seed::new(1).substream(i).rng();
            let z = wishart_from_rng(&mut rng, 2, 1, 1.0).z().clone();
            let zu = (z.transpose() * &u)[(0, 0)].abs();
            assert!(zu > SEPARATION_TOL * z.norm());
        }
    }

    #[test]
    fn separation_scale_invariant() {
        let v = Matrix::from_fn(6, 2, |i, j| (i + 2 * j) as f64);
        let mut vp = v.clone();
        vp[(0, 0)] += 1e-12;
        let tiny = separation_trial(&v, &vp, 3, 1.0 / 3.0, 2000, Seed::new(5)).unwrap();
        assert_eq!(tiny.n_equal, 0);
        assert!(matches!(
            separation_trial(&v, &v, 3, 1.0, 10, Seed::new(5)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn roc_examples() {
        let r = roc_auc(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!((r.auc, r.balanced_acc), (1.0, 1.0));
        assert_eq!(roc_auc(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap().auc, 0.5);
        assert_eq!(roc_auc(&[1.0, 3.0], &[2.0, 4.0]).unwrap().auc, 0.75);
        assert!(roc_auc(&[], &[1.0]).is_err());
    }

    fn brute_auc(a: &[f64], b: &[f64]) -> f64 {
        let mut w = 0.0;
        for x in a {
            for y in b {
                w += if x < y {
                    1.0
                } else if x == y {
                    0.5
                } else {
                    0.0
                };
            }
        }
        w / (a.len() * b.len()) as f64
    }

    proptest! {
        #[test]
        fn auc_matches_brute_force(a in proptest::collection::vec(0u8..20, 1..30), b in proptest::collection::vec(0u8..20, 1..30)) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let r = roc_auc(&a, &b).unwrap();
            prop_assert!((r.auc - brute_auc(&a, &b)).abs() < 1e-12);
            prop_assert!(r.balanced_acc >= 0.5);
        }

        #[test]
        fn auc_swaps_to_complement(a in proptest::collection::hash_set(0u32..10_000, 1..30), b in proptest::collection::hash_set(10_000u32..20_000, 0..30)) {
            let a: Vec<f64> = a.into_iter().map(|x| f64::from(x) * 0.37 % 101.0).collect();
            let mut b: Vec<f64> = b.into_iter().map(|x| f64::from(x) * 0.53 % 97.0 + 0.001).collect();
            b.retain(|x| !a.contains(x));
            prop_assume!(!b.is_empty());
            let s = roc_auc(&a, &b).unwrap().auc + roc_auc(&b, &a).unwrap().auc;
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    fn small_task() -> TrainTask {
        TaskSpec {
            kind: TaskKind::Logistic,
            n_examples: 40,
            n_features: 5,
            n_classes: 2,
            noise: 0.0,
            spike_dims: 0,
            ..TaskSpec::default()
        }
        .build()
        .unwrap()
    }

    fn proj_cfg(sigma: f64) -> DpTrainConfig {
        DpTrainConfig {
            mechanism: TrainMechanism::NoisyProj,
            sigma: Some(sigma),
            clip: f64::INFINITY,
            resample_a: true,
            r: 3,
            steps: 10,
            eta: 0.5,
            ..DpTrainConfig::default()
        }
    }

    #[test]
    fn canary_is_least_likely_and_deterministic() {
        let task = small_task();
        let cfg = proj_cfg(0.0);
        let c = craft_canary(&task, &cfg, Seed::new(9)).unwrap();
        assert_eq!(c, craft_canary(&task, &cfg, Seed::new(9)).unwrap());
        let reference = train(&task, &task.zero_weights(), &cfg, c.reference_seed).unwrap();
        let logits = &reference.w * Vector::from_column_slice(&c.x_q);
        assert!(logits[c.y_q] <= logits[1 - c.y_q]);
        assert_eq!(least_likely(&Vector::from_vec(vec![2.0, -1.0])), 1);
        let ridge = TaskSpec::default().build().unwrap();
        assert!(craft_canary(&ridge, &cfg, Seed::new(1)).is_err());
    }

    #[test]
    fn mia_is_reproducible_and_noise_kills_it() {
        let task = small_task();
        let canary = craft_canary(&task, &proj_cfg(0.0), Seed::new(2)).unwrap();
        let a = run_mia(&task, &proj_cfg(0.0), &canary, 8, 8, Seed::new(4)).unwrap();
        let b = run_mia(&task, &proj_cfg(0.0), &canary, 8, 8, Seed::new(4)).unwrap();
        assert_eq!(a, b);
        let mut cfg = proj_cfg(1e4);
        cfg.clip = 1.0;
        let n = 100;
        let noisy = run_mia(&task, &cfg, &canary, n, n, Seed::new(4)).unwrap();
        assert!((noisy.auc - 0.5).abs() <= 3.0 * auc_stderr(0.5, n, n), "{}", noisy.auc);
    }

    #[test]
    fn mia_csv_layout() {
        let res = MiaResult {
            scores_in: vec![0.1, 0.2],
            scores_out: vec![0.3],
            auc: 1.0,
            auc_stderr: 0.0,
            balanced_acc: 1.0,
            threshold: 0.2,
        };
        let mut buf = Vec::new();
        res.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "label,score\n1,0.1\n1,0.2\n0,0.3\n");
        assert_eq!(res.to_json()["auc"], 1.0);
    }
}
