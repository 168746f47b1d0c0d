//! Seeded Gaussian and Wishart sampling, projectors, and the orthogonal
//! split of a Wishart factor against a conditioning subspace.

use crate::error::{domain, Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::sync::OnceLock;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// A reproducible randomness source: a master key plus a substream index.
///
/// Identical `(master, stream)` pairs yield bit-identical draws; distinct
/// streams are independent ChaCha8 streams under the same key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Seed {
    pub master: u64,
    pub stream: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Seed {
    pub fn new(master: u64) -> Self {
        Self { master, stream: 0 }
    }

    pub fn with_stream(master: u64, stream: u64) -> Self {
        Self { master, stream }
    }

    /// Derives the `index`-th child of this seed. Children of different parents
    /// never share a key, so nested parallel loops stay reproducible.
    pub fn substream(&self, index: u64) -> Seed {
        Seed {
            master: splitmix64(self.master ^ splitmix64(self.stream.wrapping_add(0xA5A5))),
            stream: index,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(self.stream);
        rng
    }
}

pub(crate) fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// χ²_ν draw: a sum of squared normals for small ν, a Gamma(ν/2, 2) draw otherwise.
pub(crate) fn chi2_sample<R: Rng + ?Sized>(rng: &mut R, nu: usize) -> f64 {
    if nu <= 64 {
        (0..nu).map(|_| std_normal(rng).powi(2)).sum()
    } else {
        Gamma::new(nu as f64 / 2.0, 2.0)
            .expect("valid gamma parameters")
            .sample(rng)
    }
}

pub(crate) fn fill_gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, sd: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| sd * std_normal(rng))
}

/// A `rows × cols` matrix with i.i.d. N(0, var) entries.
pub fn sample_gaussian_matrix(rows: usize, cols: usize, var: f64, seed: Seed) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return domain(format!("matrix dimensions must be positive, got {rows}x{cols}"));
    }
    if !(var > 0.0 && var.is_finite()) {
        return domain(format!("entry variance must be positive, got {var}"));
    }
    let mut rng = seed.rng();
    Ok(fill_gaussian(&mut rng, rows, cols, var.sqrt()))
}

/// A sampled factor `Z` (d×r) together with its lazily built Gram matrix `M = Z Zᵀ`.
#[derive(Debug, Clone)]
pub struct WishartDraw {
    z: Matrix,
    entry_var: f64,
    gram: OnceLock<Matrix>,
}

impl WishartDraw {
    /// Wraps an explicit factor; used by tests and by callers with a fixed `Z`.
    pub fn from_factor(z: Matrix, entry_var: f64) -> Result<Self> {
        if z.nrows() == 0 || z.ncols() == 0 {
            return domain("Wishart factor must be non-empty");
        }
        if !(entry_var > 0.0) {
            return domain(format!("entry variance must be positive, got {entry_var}"));
        }
        Ok(Self {
            z,
            entry_var,
            gram: OnceLock::new(),
        })
    }

    pub fn z(&self) -> &Matrix {
        &self.z
    }

    pub fn d(&self) -> usize {
        self.z.nrows()
    }

    pub fn r(&self) -> usize {
        self.z.ncols()
    }

    pub fn entry_var(&self) -> f64 {
        self.entry_var
    }

    /// `M = Z Zᵀ`.
    pub fn gram(&self) -> &Matrix {
        self.gram.get_or_init(|| &self.z * self.z.transpose())
    }

    /// `M · V` computed as `Z (Zᵀ V)`, without forming `M`.
    pub fn apply(&self, v: &Matrix) -> Result<Matrix> {
        if v.nrows() != self.d() {
            return Err(Error::Shape(format!(
                "input has {} rows but the projection acts on dimension {}",
                v.nrows(),
                self.d()
            )));
        }
        Ok(&self.z * (self.z.transpose() * v))
    }

    /// Nonzero eigenvalues of `M` (squared singular values of `Z` above the
    /// numerical rank threshold), in decreasing order.
    pub fn nonzero_spectrum(&self) -> Vec<f64> {
        let sv = self.z.clone().svd(false, false).singular_values;
        let smax = sv.iter().cloned().fold(0.0, f64::max);
        let tol = default_rank_tol(self.d(), self.r(), smax);
        let mut eig: Vec<f64> = sv.iter().filter(|&&s| s > tol).map(|s| s * s).collect();
        eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
        eig
    }

    pub fn rank(&self) -> usize {
        self.nonzero_spectrum().len()
    }
}

/// Samples `Z` with i.i.d. N(0, entry_var) entries and wraps it as a Wishart draw.
pub fn wishart_draw(d: usize, r: usize, entry_var: f64, seed: Seed) -> Result<WishartDraw> {
    let z = sample_gaussian_matrix(d, r, entry_var, seed)?;
    WishartDraw::from_factor(z, entry_var)
}

/// Sampling helper for hot loops that already own an RNG.
pub(crate) fn wishart_from_rng<R: Rng + ?Sized>(rng: &mut R, d: usize, r: usize, entry_var: f64) -> WishartDraw {
    WishartDraw {
        z: fill_gaussian(rng, d, r, entry_var.sqrt()),
        entry_var,
        gram: OnceLock::new(),
    }
}

/// The conventional numerical-rank threshold `max(rows, cols) · ε · σ_max`.
pub fn default_rank_tol(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * sigma_max
}

/// Orthonormal basis (as columns) of `col(Z)`, via the SVD.
pub fn col_basis(z: &Matrix) -> Result<Matrix> {
    if z.iter().all(|&x| x == 0.0) {
        return Err(Error::Degenerate("column space of an all-zero matrix".into()));
    }
    let svd = z.clone().svd(true, false);
    let u = svd.u.expect("U requested");
    let sv = &svd.singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let tol = default_rank_tol(z.nrows(), z.ncols(), smax);
    let keep: Vec<usize> = (0..sv.len()).filter(|&i| sv[i] > tol).collect();
    Ok(u.select_columns(keep.iter()))
}

/// Orthogonal projector onto `col(Z)`.
pub fn col_projector(z: &Matrix) -> Result<Matrix> {
    let q = col_basis(z)?;
    Ok(&q * q.transpose())
}

fn frob2(m: &Matrix) -> f64 {
    m.iter().map(|x| x * x).sum()
}

/// `‖P_M ΔV‖²_F / ‖ΔV‖²_F`, the share of the difference retained by `col(Z)`.
pub fn capture_fraction(z: &Matrix, delta_v: &Matrix) -> Result<f64> {
    if z.nrows() != delta_v.nrows() {
        return Err(Error::Shape(format!(
            "Z has {} rows but ΔV has {}",
            z.nrows(),
            delta_v.nrows()
        )));
    }
    let total = frob2(delta_v);
    if total == 0.0 {
        return Err(Error::Degenerate("ΔV is zero".into()));
    }
    let q = col_basis(z)?;
    let kept = frob2(&(q.transpose() * delta_v));
    Ok((kept / total).clamp(0.0, 1.0))
}

/// The split `M = M_par + M_perp` of a Wishart factor against a subspace `S = span(U)`.
#[derive(Debug, Clone)]
pub struct OrthogonalSplit {
    pub u: Matrix,
    /// `dim rowspan(Uᵀ Z)`.
    pub p: usize,
    pub p_h: Matrix,
    pub z_par: Matrix,
    pub z_perp: Matrix,
    pub m_par: Matrix,
    pub m_perp: Matrix,
}

/// Splits `Z` along `H = rowspan(Uᵀ Z)`.
///
/// `rank_tol <= 0` selects the default numerical rank threshold.
pub fn orthogonal_split(z: &Matrix, u: &Matrix, rank_tol: f64) -> Result<OrthogonalSplit> {
    let (d, r) = z.shape();
    if u.nrows() != d {
        return Err(Error::Shape(format!("U has {} rows, Z has {d}", u.nrows())));
    }
    let s = u.ncols();
    if s > 0 {
        let gram = u.transpose() * u;
        let dev = (&gram - Matrix::identity(s, s)).abs().max();
        if dev > 1e-10 {
            return domain(format!("U must have orthonormal columns (max |UᵀU - I| = {dev:.3e})"));
        }
    }

    let p_h = if s == 0 {
        Matrix::zeros(r, r)
    } else {
        let g = u.transpose() * z;
        let svd = g.svd(false, true);
        let v_t = svd.v_t.expect("V requested");
        let sv = &svd.singular_values;
        let smax = sv.iter().cloned().fold(0.0, f64::max);
        let tol = if rank_tol > 0.0 {
            rank_tol
        } else {
            default_rank_tol(s, r, smax)
        };
        let keep: Vec<usize> = (0..sv.len()).filter(|&i| sv[i] > tol).collect();
        let basis = v_t.select_rows(keep.iter()).transpose();
        &basis * basis.transpose()
    };
    let p = p_h.trace().round() as usize;
    let p_perp = Matrix::identity(r, r) - &p_h;
    let z_par = z * &p_h;
    let z_perp = z * &p_perp;
    let m_par = &z_par * z_par.transpose();
    let m_perp = &z_perp * z_perp.transpose();
    Ok(OrthogonalSplit {
        u: u.clone(),
        p,
        p_h,
        z_par,
        z_perp,
        m_par,
        m_perp,
    })
}

/// Interval that holds the nonzero spectrum of `Z Zᵀ` with probability at least
/// `1 - 2 exp(-t²/2)`, for `Z` with i.i.d. N(0, entry_var) entries and `d >= r`.
pub fn wishart_spectrum_bounds(d: usize, r: usize, t: f64, entry_var: f64) -> (f64, f64) {
    let ratio = (d as f64 / r as f64).sqrt();
    let dev = 1.0 + t / (r as f64).sqrt();
    let scale = r as f64 * entry_var;
    let lo = (ratio - dev).max(0.0);
    (lo * lo * scale, (ratio + dev).powi(2) * scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumTrials {
    pub d: usize,
    pub r: usize,
    pub t: f64,
    pub lower: f64,
    pub upper: f64,
    pub draws: usize,
    /// Draws whose whole nonzero spectrum fell inside `[lower, upper]`.
    pub inside: usize,
    pub min_eig: f64,
    pub max_eig: f64,
    /// Nonzero spectrum of each draw, decreasing.
    #[serde(skip)]
    pub spectra: Vec<Vec<f64>>,
}

/// Draws `M` `draws` times (draw `i` from `seed.substream(i)`) and checks the
/// nonzero spectrum against [`wishart_spectrum_bounds`].
pub fn spectrum_trials(d: usize, r: usize, t: f64, entry_var: f64, draws: usize, seed: Seed) -> Result<SpectrumTrials> {
    use rayon::prelude::*;
    if r == 0 || d < r || !(entry_var > 0.0) || !(t >= 0.0) || draws == 0 {
        return domain("spectrum trials need 1 <= r <= d, positive entry_var, t >= 0 and draws >= 1");
    }
    let (lower, upper) = wishart_spectrum_bounds(d, r, t, entry_var);
    let spectra: Vec<Vec<f64>> = (0..draws)
        .into_par_iter()
        .map(|i| wishart_from_rng(&mut seed.substream(i as u64).rng(), d, r, entry_var).nonzero_spectrum())
        .collect();
    let inside = spectra
        .iter()
        .filter(|s| s.len() == r && s.iter().all(|&e| e >= lower && e <= upper))
        .count();
    let all = spectra.iter().flatten();
    Ok(SpectrumTrials {
        d,
        r,
        t,
        lower,
        upper,
        draws,
        inside,
        min_eig: all.clone().copied().fold(f64::INFINITY, f64::min),
        max_eig: all.copied().fold(f64::NEG_INFINITY, f64::max),
        spectra,
    })
}

/// Writes a matrix as CSV: a `# rows cols` header line, then one line per row.
pub fn write_matrix_csv<W: Write>(out: W, m: &Matrix) -> Result<()> {
    let mut out = out;
    writeln!(out, "# {} {}", m.nrows(), m.ncols())?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|x| format!("{x:e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the format produced by [`write_matrix_csv`].
pub fn read_matrix_csv<R: BufRead>(input: R) -> Result<Matrix> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Io("empty matrix file".into()))??;
    let dims: Vec<usize> = header
        .trim_start_matches('#')
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Io(format!("bad matrix header {header:?}: {e}")))?;
    if dims.len() != 2 {
        return Err(Error::Io(format!("bad matrix header {header:?}")));
    }
    let (rows, cols) = (dims[0], dims[1]);
    let mut data = Vec::with_capacity(rows * cols);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        for tok in line.split(',') {
            data.push(
                tok.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Io(format!("bad matrix entry {tok:?}: {e}")))?,
            );
        }
    }
    if data.len() != rows * cols {
        return Err(Error::Io(format!(
            "matrix body has {} entries, header promises {rows}x{cols}",
            data.len()
        )));
    }
    Ok(Matrix::from_row_slice(rows, cols, &data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frob(m: &Matrix) -> f64 {
        frob2(m).sqrt()
    }

    #[test]
    fn gaussian_matrix_is_deterministic() {
        let s = Seed::with_stream(11, 3);
        let a = sample_gaussian_matrix(2, 2, 1.0, s).unwrap();
        let b = sample_gaussian_matrix(2, 2, 1.0, s).unwrap();
        assert_eq!(a, b);
        let c = sample_gaussian_matrix(2, 2, 1.0, Seed::with_stream(11, 4)).unwrap();
        assert_ne!(a, c);
        assert!(sample_gaussian_matrix(0, 2, 1.0, s).is_err());
        assert!(sample_gaussian_matrix(2, 2, 0.0, s).is_err());
    }

    #[test]
    fn gaussian_matrix_moments() {
        let m = sample_gaussian_matrix(1000, 1000, 1.0, Seed::new(5)).unwrap();
        let n = m.len() as f64;
        let mean = m.sum() / n;
        let var = m.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 0.01, "mean {mean}");
        assert!((0.99..=1.01).contains(&var), "var {var}");
    }

    #[test]
    fn gaussian_frobenius_expectation() {
        let reps = 10_000;
        let mut acc = 0.0;
        let base = Seed::new(17);
        for i in 0..reps {
            let z = sample_gaussian_matrix(3, 2, 0.5, base.substream(i)).unwrap();
            acc += frob2(&z);
        }
        let mean = acc / reps as f64;
        assert!((mean - 3.0).abs() <= 0.05 * 3.0, "mean {mean}");
    }

    #[test]
    fn wishart_mean_is_identity() {
        let reps = 100_000u64;
        let mut acc = Matrix::zeros(4, 4);
        let base = Seed::new(23);
        let mut rng = base.rng();
        for _ in 0..reps {
            let w = wishart_from_rng(&mut rng, 4, 4, 0.25);
            acc += w.gram();
        }
        acc /= reps as f64;
        let dev = (acc - Matrix::identity(4, 4)).abs().max();
        assert!(dev <= 0.02, "max deviation {dev}");
    }

    #[test]
    fn rank_one_draw() {
        let w = wishart_draw(3, 1, 1.0, Seed::new(1)).unwrap();
        assert_eq!(w.rank(), 1);
    }

    #[test]
    fn gram_is_psd() {
        let w = wishart_draw(30, 7, 1.0 / 7.0, Seed::new(2)).unwrap();
        let m = w.gram();
        assert!((m - m.transpose()).abs().max() < 1e-14);
        let op = w.nonzero_spectrum()[0];
        let mut rng = Seed::new(3).rng();
        for _ in 0..100 {
            let x = Vector::from_fn(30, |_, _| std_normal(&mut rng));
            let q = (x.transpose() * m * &x)[(0, 0)];
            assert!(q >= -1e-10 * op * x.norm_squared());
        }
    }

    #[test]
    fn projector_examples() {
        let e1 = Matrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let p = col_projector(&e1).unwrap();
        assert_eq!(p, Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 0.0, 0.0])));

        let q = Matrix::from_column_slice(4, 2, &[0.5, 0.5, 0.5, 0.5, 0.5, -0.5, 0.5, -0.5]);
        let p = col_projector(&q).unwrap();
        assert!((p - &q * q.transpose()).abs().max() < 1e-12);

        let z = sample_gaussian_matrix(5, 2, 1.0, Seed::new(9)).unwrap();
        let p = col_projector(&z).unwrap();
        assert!((p.trace() - 2.0).abs() < 1e-9);
        assert!((&p * &p - &p).abs().max() < 1e-10);
        assert!((&p - p.transpose()).abs().max() < 1e-12);
        assert!(frob(&(&p * &z - &z)) <= 1e-9 * frob(&z));

        assert!(matches!(col_projector(&Matrix::zeros(3, 2)), Err(Error::Degenerate(_))));
    }

    fn random_orthonormal(d: usize, s: usize, seed: Seed) -> Matrix {
        let g = sample_gaussian_matrix(d, s, 1.0, seed).unwrap();
        g.qr().q()
    }

    #[test]
    fn split_reconstructs() {
        let z = sample_gaussian_matrix(6, 3, 1.0, Seed::new(31)).unwrap();
        let u = random_orthonormal(6, 2, Seed::new(32));
        let sp = orthogonal_split(&z, &u, 0.0).unwrap();
        let m = &z * z.transpose();
        assert!(frob(&(&m - &sp.m_par - &sp.m_perp)) <= 1e-9 * frob(&m));
        assert!((u.transpose() * &sp.z_perp).abs().max() < 1e-9);
        assert!((&sp.m_perp * &u).abs().max() < 1e-9);
        assert!(sp.p <= 2);
        assert_eq!(sp.p, 2);
        // columns inside S see only the parallel block
        let v = &u * Vector::from_vec(vec![0.3, -1.2]);
        assert!((&m * &v - &sp.m_par * &v).abs().max() < 1e-9);
    }

    #[test]
    fn split_edge_cases() {
        let z = sample_gaussian_matrix(5, 3, 1.0, Seed::new(41)).unwrap();
        let empty = Matrix::zeros(5, 0);
        let sp = orthogonal_split(&z, &empty, 0.0).unwrap();
        assert_eq!(sp.p, 0);
        assert_eq!(sp.m_par, Matrix::zeros(5, 5));
        assert!((sp.m_perp - &z * z.transpose()).abs().max() < 1e-12);

        let full = Matrix::identity(5, 5);
        let sp = orthogonal_split(&z, &full, 0.0).unwrap();
        assert_eq!(sp.p, 3);
        assert!(sp.m_perp.abs().max() < 1e-10);

        let bad = Matrix::from_element(5, 1, 1.0);
        assert!(matches!(orthogonal_split(&z, &bad, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn capture_fraction_extremes() {
        let z = Matrix::from_column_slice(3, 1, &[1.0, 1.0, 0.0]);
        let inside = Matrix::from_column_slice(3, 2, &[2.0, 2.0, 0.0, -1.0, -1.0, 0.0]);
        assert!((capture_fraction(&z, &inside).unwrap() - 1.0).abs() < 1e-12);
        let outside = Matrix::from_column_slice(3, 1, &[1.0, -1.0, 3.0]);
        assert!(capture_fraction(&z, &outside).unwrap().abs() < 1e-12);
        assert!(capture_fraction(&z, &Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn spectrum_bounds_cover_draws() {
        let (lo, hi) = wishart_spectrum_bounds(400, 20, 4.0, 1.0 / 20.0);
        let mut ok = 0;
        for i in 0..20 {
            let w = wishart_draw(400, 20, 1.0 / 20.0, Seed::new(7).substream(i)).unwrap();
            let eig = w.nonzero_spectrum();
            assert_eq!(eig.len(), 20);
            if eig[0] <= hi && *eig.last().unwrap() >= lo {
                ok += 1;
            }
        }
        assert!(ok >= 19);
    }

    #[test]
    fn matrix_csv_round_trip() {
        let m = sample_gaussian_matrix(3, 4, 2.0, Seed::new(1)).unwrap();
        let mut buf = Vec::new();
        write_matrix_csv(&mut buf, &m).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# 3 4\n"));
        let back = read_matrix_csv(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, m);
    }
}
