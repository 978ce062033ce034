use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{ErqError, Result};

/// Cholesky factorization of `A + λI` for a symmetric PSD `A`, shared across
/// any number of right-hand sides.
#[derive(Debug, Clone)]
pub struct RidgeSystem {
    chol: Cholesky<f64, Dyn>,
}

impl RidgeSystem {
    pub fn new(gram: &DMatrix<f64>, lambda: f64, what: &str) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(ErqError::validation(format!(
                "{what}: regularization must be finite and non-negative, got {lambda}"
            )));
        }
        let n = gram.nrows();
        let mut a = gram.clone();
        for i in 0..n {
            a[(i, i)] += lambda;
        }
        Cholesky::new(a).map(|chol| Self { chol }).ok_or_else(|| {
            ErqError::Numerical(format!(
                "{what}: system matrix is not positive definite at lambda={lambda}; use a positive regularization strength"
            ))
        })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// Solves `X (A + λI) = B` for every row of `B`.
    pub fn solve_rows(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(&b.transpose()).transpose()
    }

    /// Solves `(A + λI) x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }
}
