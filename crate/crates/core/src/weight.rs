//! Positive-definite weight matrices and the quadratic form they induce.
//!
//! All `W^{-1}`-applications go through the cached Cholesky factor `W = L L^T`;
//! the inverse is never formed explicitly.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{CalError, Result};

/// Storage form of a weight matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum WeightForm {
    /// Diagonal W, stored as the diagonal entries.
    Diagonal(Vec<f64>),
    /// Dense symmetric W, stored row-major.
    Dense { dim: usize, entries: Vec<f64> },
}

/// A symmetric positive-definite weight matrix defining the norm
/// `||v||_W = v^T W^{-1} v`.
#[derive(Clone, Debug)]
pub struct WeightMatrix {
    form: WeightForm,
    dim: usize,
    chol: Cholesky<f64, Dyn>,
}

impl WeightMatrix {
    /// Identity weight of dimension `dim`.
    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![1.0; dim]).expect("identity is positive definite")
    }

    /// Diagonal weight from positive entries.
    pub fn diagonal(entries: &[f64]) -> Result<Self> {
        if entries.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(CalError::NotPositiveDefinite);
        }
        let dim = entries.len();
        let dense = DMatrix::from_diagonal(&DVector::from_column_slice(entries));
        let chol = Cholesky::new(dense).ok_or(CalError::NotPositiveDefinite)?;
        Ok(Self {
            form: WeightForm::Diagonal(entries.to_vec()),
            dim,
            chol,
        })
    }

    /// Dense weight from a symmetric positive-definite matrix.
    pub fn dense(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(CalError::DimensionMismatch {
                expected: matrix.nrows(),
                got: matrix.ncols(),
                context: "weight matrix must be square",
            });
        }
        let dim = matrix.nrows();
        let form = WeightForm::Dense {
            dim,
            entries: matrix.as_slice().to_vec(),
        };
        let chol = Cholesky::new(matrix).ok_or(CalError::NotPositiveDefinite)?;
        Ok(Self { form, dim, chol })
    }

    /// The same matrix scaled by a positive factor; the storage form is kept.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(CalError::InvalidArgument(format!(
                "scale factor must be positive, got {factor}"
            )));
        }
        match &self.form {
            WeightForm::Diagonal(entries) => {
                let scaled: Vec<f64> = entries.iter().map(|e| e * factor).collect();
                Self::diagonal(&scaled)
            }
            WeightForm::Dense { .. } => Self::dense(self.to_dense() * factor),
        }
    }

    /// Dense weight, retrying with diagonal jitter up to `max_jitter` if the
    /// first factorization fails.
    pub fn dense_with_jitter(matrix: DMatrix<f64>, max_jitter: f64) -> Result<Self> {
        match Self::dense(matrix.clone()) {
            Ok(w) => Ok(w),
            Err(_) => {
                let mut jitter = 1e-10;
                while jitter <= max_jitter {
                    let mut m = matrix.clone();
                    for i in 0..m.nrows() {
                        m[(i, i)] += jitter;
                    }
                    if let Ok(w) = Self::dense(m) {
                        return Ok(w);
                    }
                    jitter *= 10.0;
                }
                Err(CalError::NotPositiveDefinite)
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn form(&self) -> &WeightForm {
        &self.form
    }

    /// W as a dense matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        match &self.form {
            WeightForm::Diagonal(d) => {
                DMatrix::from_diagonal(&DVector::from_column_slice(d))
            }
            WeightForm::Dense { dim, entries } => {
                DMatrix::from_row_slice(*dim, *dim, entries)
            }
        }
    }

    /// Solve `W x = v`.
    pub fn solve_vec(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(v.len(), "solve_vec")?;
        Ok(self.chol.solve(v))
    }

    /// Solve `W X = M` column-wise.
    pub fn solve_mat(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(m.nrows(), "solve_mat")?;
        Ok(self.chol.solve(m))
    }

    /// The quadratic form `v^T W^{-1} v` (the squared W-norm).
    pub fn quad_form(&self, v: &DVector<f64>) -> Result<f64> {
        self.check_dim(v.len(), "quad_form")?;
        // v^T W^{-1} v = ||L^{-1} v||^2 via one triangular solve.
        let y = self
            .chol
            .l_dirty()
            .solve_lower_triangular(v)
            .ok_or(CalError::NotPositiveDefinite)?;
        Ok(y.norm_squared())
    }

    /// The W-inner product `u^T W^{-1} v`.
    pub fn inner(&self, u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
        self.check_dim(u.len(), "inner")?;
        self.check_dim(v.len(), "inner")?;
        Ok(u.dot(&self.chol.solve(v)))
    }

    /// Whitening transform `L^{-1} M` where `W = L L^T`.
    pub fn whiten(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(m.nrows(), "whiten")?;
        self.chol
            .l_dirty()
            .solve_lower_triangular(m)
            .ok_or(CalError::NotPositiveDefinite)
    }

    /// The inverse transform `L M`.
    pub fn unwhiten(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(m.nrows(), "unwhiten")?;
        Ok(self.chol.l() * m)
    }

    /// Lower Cholesky factor `L`.
    pub fn chol_l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    fn check_dim(&self, got: usize, context: &'static str) -> Result<()> {
        if got != self.dim {
            return Err(CalError::DimensionMismatch {
                expected: self.dim,
                got,
                context,
            });
        }
        Ok(())
    }
}
