//! Small linear-algebra helpers shared by filtering, smoothing and EM.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Jitter ladder used when a nominally PSD matrix fails to factor.
/// The first rung is the documented 1e-9 safeguard; later rungs only
/// fire on severely degenerate inputs.
const JITTERS: [f64; 4] = [0.0, 1e-9, 1e-7, 1e-5];

/// Force exact symmetry: `(m + m^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Cholesky factorization with an escalating diagonal jitter.
///
/// Returns the factorization and the number of jitter escalations that
/// were needed (0 when the matrix factored as given).
pub fn chol_with_jitter(m: &DMatrix<f64>, step: usize) -> Result<(Cholesky<f64, Dyn>, usize)> {
    let n = m.nrows();
    for (i, eps) in JITTERS.iter().enumerate() {
        let candidate = if *eps == 0.0 {
            m.clone()
        } else {
            m + DMatrix::identity(n, n) * *eps
        };
        if let Some(chol) = Cholesky::new(candidate) {
            return Ok((chol, i));
        }
    }
    Err(Error::numerical(step, "matrix not positive definite even after jitter"))
}

/// log(det(M)) from a Cholesky factor.
pub fn logdet(chol: &Cholesky<f64, Dyn>) -> f64 {
    chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum()
}

/// Solve `M x = b` for symmetric positive (semi)definite `M`, jittering on
/// failure. Returns the solution and the jitter escalation count.
pub fn solve_spd(m: &DMatrix<f64>, b: &DMatrix<f64>, step: usize) -> Result<(DMatrix<f64>, usize)> {
    let (chol, jitters) = chol_with_jitter(m, step)?;
    Ok((chol.solve(b), jitters))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Project a symmetric matrix onto the PSD cone by flooring its
/// eigenvalues at `floor`.
pub fn psd_floor(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < floor {
            *v = floor;
        }
    }
    let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&vals);
    symmetrize(&(scaled * eig.eigenvectors.transpose()))
}

/// Spectral radius estimate via eigenvalues of `M^T M` (largest singular
/// value, an upper bound usable for stability warnings).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let gram = m.transpose() * m;
    min_eigenvalue(&(-gram)).abs().sqrt()
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Sample variance of a slice (population denominator `n`).
pub fn variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// Median of a slice (mean of the two middle elements for even lengths).
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Percentile via linear interpolation between order statistics.
pub fn percentile(xs: &[f64], p: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        v[lo]
    } else {
        v[lo] + (rank - lo as f64) * (v[hi] - v[lo])
    }
}

/// Deterministic substream seed derived from a root seed and a label.
/// splitmix64 over the root xored with a label hash keeps substreams
/// platform-stable without pulling in a hashing crate.
pub fn substream_seed(root: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = root ^ h;
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Pooled RMSE from (sum of squared errors, cell count) pairs.
pub fn pooled_rmse(sse_n: &[(f64, usize)]) -> f64 {
    let sse: f64 = sse_n.iter().map(|(s, _)| s).sum();
    let n: usize = sse_n.iter().map(|(_, n)| n).sum();
    if n == 0 {
        f64::NAN
    } else {
        (sse / n as f64).sqrt()
    }
}
