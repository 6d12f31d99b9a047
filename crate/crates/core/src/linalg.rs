//! Dense linear-algebra helpers shared by the Nyström solvers.

use nalgebra::{DMatrix, DVector, SymmetricEigen, LU};

use crate::error::{Error, Result};

/// Reciprocal condition threshold below which a Nyström matrix is treated as singular.
pub const RCOND_THRESHOLD: f64 = 1e-12;

/// LU factorization together with a reciprocal 1-norm condition estimate.
pub struct Factored {
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    l: DMatrix<f64>,
    u: DMatrix<f64>,
    pub rcond: f64,
}

impl Factored {
    /// Factor `m`, failing with [`Error::Singular`] when the condition estimate
    /// drops below [`RCOND_THRESHOLD`].
    pub fn new(m: DMatrix<f64>, context: &str) -> Result<Self> {
        assert!(m.is_square());
        let norm1 = one_norm(&m);
        let lu = m.lu();
        let l = lu.l();
        let u = lu.u();
        let singular = |rcond: f64| Error::Singular {
            rcond,
            context: context.to_string(),
        };
        if u.diagonal().iter().any(|d| *d == 0.0 || !d.is_finite()) {
            return Err(singular(0.0));
        }
        let mut f = Factored { lu, l, u, rcond: 0.0 };
        let inv_norm = f.inverse_one_norm_estimate();
        let rcond = if norm1 == 0.0 || !inv_norm.is_finite() {
            0.0
        } else {
            1.0 / (norm1 * inv_norm)
        };
        f.rcond = rcond;
        if rcond < RCOND_THRESHOLD || !rcond.is_finite() {
            return Err(singular(rcond));
        }
        Ok(f)
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.lu
            .solve(rhs)
            .expect("nonsingular factorization checked at construction")
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.lu
            .solve(rhs)
            .expect("nonsingular factorization checked at construction")
    }

    /// Solves `mᵀ x = rhs` reusing the factors of `m` (`P m = L U`).
    fn solve_transposed(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let z = self
            .u
            .tr_solve_upper_triangular(rhs)
            .unwrap_or_else(|| DVector::from_element(rhs.len(), f64::INFINITY));
        let mut v = self
            .l
            .tr_solve_lower_triangular(&z)
            .unwrap_or_else(|| DVector::from_element(rhs.len(), f64::INFINITY));
        self.lu.p().inv_permute_rows(&mut v);
        v
    }

    /// Hager's estimator for ‖m⁻¹‖₁, with Higham's alternating-sign safeguard.
    fn inverse_one_norm_estimate(&self) -> f64 {
        let n = self.l.nrows();
        let mut x = DVector::from_element(n, 1.0 / n as f64);
        let mut est = 0.0;
        for _ in 0..5 {
            let y = self.solve_vec(&x);
            est = y.iter().map(|v| v.abs()).sum::<f64>();
            let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
            let z = self.solve_transposed(&xi);
            let (jmax, zmax) = z
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, v)| {
                    if v.abs() > acc.1 {
                        (j, v.abs())
                    } else {
                        acc
                    }
                });
            if !zmax.is_finite() {
                return f64::INFINITY;
            }
            if zmax <= z.dot(&x) {
                break;
            }
            x = DVector::zeros(n);
            x[jmax] = 1.0;
        }
        if n > 1 {
            let alt = DVector::from_fn(n, |i, _| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                s * (1.0 + i as f64 / (n - 1) as f64)
            });
            let y = self.solve_vec(&alt);
            let alt_est = 2.0 * y.iter().map(|v| v.abs()).sum::<f64>() / (3.0 * n as f64);
            est = est.max(alt_est);
        }
        est
    }
}

pub fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    let scale = 1.0 + max_abs(m);
    (m - m.transpose()).iter().all(|v| v.abs() <= rel_tol * scale)
}

/// Inverse square root of a symmetric positive-definite matrix.
/// Returns `None` when some eigenvalue is not strictly positive.
pub fn spd_inv_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().any(|l| !(*l > 0.0)) {
        return None;
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Some(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Inverse of a small invertible block, with a singularity message on failure.
pub fn invert_block(m: &DMatrix<f64>, what: impl FnOnce() -> String) -> Result<DMatrix<f64>> {
    match m.clone().try_inverse() {
        Some(inv) if inv.iter().all(|v| v.is_finite()) => Ok(inv),
        _ => Err(Error::precondition(format!("{} is not invertible", what()))),
    }
}
