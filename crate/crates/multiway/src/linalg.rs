//! Symmetric positive-definite matrices with a cached Cholesky factor.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;
const JITTER: f64 = 1e-10;
const REPAIR_ATTEMPTS: usize = 3;

#[derive(Debug, Clone)]
pub struct Spd {
    matrix: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl Spd {
    /// Factorizes `matrix`, symmetrizing it first and adding diagonal jitter
    /// (`1e-10 * trace / p`, growing 100x per retry) when the plain
    /// factorization fails.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(Error::NotSpd(format!("shape {:?}", matrix.shape())));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotSpd("non-finite entry".into()));
        }
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::NotSpd(format!("asymmetry {asym:e} relative to {scale:e}")));
        }
        let sym = (&matrix + matrix.transpose()) * 0.5;
        if let Some(chol) = sym.clone().cholesky() {
            return Ok(Spd { matrix: sym, chol });
        }
        let p = sym.nrows() as f64;
        let base = JITTER * sym.trace() / p;
        if base > 0.0 {
            let mut jitter = base;
            for _ in 0..REPAIR_ATTEMPTS {
                let mut repaired = sym.clone();
                for i in 0..repaired.nrows() {
                    repaired[(i, i)] += jitter;
                }
                if let Some(chol) = repaired.clone().cholesky() {
                    return Ok(Spd {
                        matrix: repaired,
                        chol,
                    });
                }
                jitter *= 100.0;
            }
        }
        Err(Error::NotSpd("Cholesky factorization failed after repair".into()))
    }

    pub fn identity(p: usize) -> Self {
        Self::scaled_identity(p, 1.0)
    }

    pub fn scaled_identity(p: usize, c: f64) -> Self {
        Spd::new(DMatrix::identity(p, p) * c).expect("positive multiple of identity")
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    /// Lower-triangular `L` with `A = L L^T`.
    pub fn chol_l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// `A^{-1} B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.chol.inverse();
        (&inv + inv.transpose()) * 0.5
    }

    pub fn inverse_spd(&self) -> Result<Spd> {
        Spd::new(self.inverse())
    }

    pub fn ln_det(&self) -> f64 {
        self.chol.ln_determinant()
    }
}

impl PartialEq for Spd {
    fn eq(&self, other: &Self) -> bool {
        self.matrix == other.matrix
    }
}

/// Solves `A x = b` for symmetric positive-definite `A`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(Spd::new(a.clone())?.solve_vec(b))
}

/// Inverse of a lower-triangular matrix with nonzero diagonal.
pub(crate) fn lower_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut inv = DMatrix::identity(n, n);
    l.solve_lower_triangular_mut(&mut inv);
    inv
}
