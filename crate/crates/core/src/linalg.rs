//! Small dense/banded linear algebra helpers on top of nalgebra.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::prelude::*;

/// LU factorization with partial pivoting that only touches the band of the
/// matrix. Pivoting may widen the upper band to `kl + ku`, which is accounted
/// for. Storage is dense row-major so the factors can be reused for several
/// right-hand sides.
#[derive(Debug, Clone)]
pub struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    lu: Vec<f64>,
    piv: Vec<usize>,
    min_pivot: f64,
}

impl BandLu {
    pub fn factor(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Shape(format!("BandLu needs a square matrix, got {}x{}", n, a.ncols())));
        }
        let (mut kl, mut ku) = (0usize, 0usize);
        let mut lu = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let v = a[(i, j)];
                if v != 0.0 {
                    lu[i * n + j] = v;
                    if i > j {
                        kl = kl.max(i - j);
                    } else {
                        ku = ku.max(j - i);
                    }
                }
            }
        }
        let mut piv = vec![0; n];
        let mut min_pivot = f64::INFINITY;
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for i in k + 1..=last {
                let v = lu[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            piv[k] = p;
            min_pivot = min_pivot.min(best);
            // Only exact breakdown is rejected: barrier KKT systems legitimately mix
            // pivots across ~30 decades, so callers check their solutions.
            if !(best > 0.0 && best.is_finite()) {
                return Err(Error::Singular(format!("zero pivot {best:e} at column {k}")));
            }
            let cend = (k + kl + ku + 1).min(n);
            if p != k {
                for j in k..cend {
                    lu.swap(k * n + j, p * n + j);
                }
            }
            let d = lu[k * n + k];
            for i in k + 1..=last {
                let l = lu[i * n + k] / d;
                if l == 0.0 {
                    continue;
                }
                lu[i * n + k] = l;
                for j in k + 1..cend {
                    lu[i * n + j] -= l * lu[k * n + j];
                }
            }
        }
        Ok(Self { n, kl, ku, lu, piv, min_pivot })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Smallest pivot magnitude met during elimination.
    pub fn min_pivot(&self) -> f64 {
        self.min_pivot
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        let w = self.kl + self.ku + 1;
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            if bk != 0.0 {
                for i in k + 1..(k + self.kl + 1).min(n) {
                    b[i] -= self.lu[i * n + k] * bk;
                }
            }
        }
        for k in (0..n).rev() {
            let mut acc = b[k];
            for j in k + 1..(k + w).min(n) {
                acc -= self.lu[k * n + j] * b[j];
            }
            b[k] = acc / self.lu[k * n + k];
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }
}

/// Symmetric part `(M + Mᵀ)/2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    symmetrize(m).symmetric_eigenvalues().min()
}

/// Nearest symmetric matrix whose eigenvalues are all `>= eps`.
///
/// Returns `None` when `m` is already symmetric with minimum eigenvalue
/// `>= eps`, so callers can keep the original bits.
pub fn clamp_eigenvalues(m: &DMatrix<f64>, eps: f64) -> Option<DMatrix<f64>> {
    let sym = symmetrize(m);
    let eig = sym.clone().symmetric_eigen();
    // Roundoff slack so a clamped matrix counts as admissible again.
    let slack = 64.0 * f64::EPSILON * eig.eigenvalues.amax();
    if &sym == m && eig.eigenvalues.iter().all(|&l| l >= eps - slack) {
        return None;
    }
    let vals = eig.eigenvalues.map(|l| l.max(eps));
    let q = &eig.eigenvectors;
    let out = q * DMatrix::from_diagonal(&vals) * q.transpose();
    Some(symmetrize(&out))
}

/// Solves the discounted Stein equation `X - γ AᵀXA = Q` by a Kronecker
/// product solve. Meant for the small state dimensions used here.
pub fn stein_solve(a: &DMatrix<f64>, q: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let at = a.transpose();
    // vec(AᵀXA) = (Aᵀ ⊗ Aᵀ) vec(X) in column-major vec.
    let kron = at.kronecker(&at);
    let m = DMatrix::<f64>::identity(n * n, n * n) - kron * gamma;
    let rhs = DVector::from_column_slice(q.as_slice());
    let lu = m.lu();
    let x = lu.solve(&rhs).ok_or_else(|| Error::Singular("Stein equation operator is singular".to_string()))?;
    Ok(symmetrize(&DMatrix::from_column_slice(n, n, x.as_slice())))
}

pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    m.complex_eigenvalues().iter().copied().collect()
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m).iter().fold(0.0, |r, l| r.max(l.re.hypot(l.im)))
}
