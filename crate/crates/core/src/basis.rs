//! Weighted-norm projection, reconstruction and variance-explained measures.

use nalgebra::{DMatrix, DVector};

use crate::error::{CalError, Result};
use crate::weight::WeightMatrix;

/// An `l x k` matrix of basis vectors (columns).
#[derive(Clone, Debug)]
pub struct Basis {
    vectors: DMatrix<f64>,
    /// Set when the columns are known to be W-orthonormal for some weight.
    w_orthonormal: bool,
}

impl Basis {
    pub fn new(vectors: DMatrix<f64>) -> Self {
        Self {
            vectors,
            w_orthonormal: false,
        }
    }

    /// Mark the basis as W-orthonormal after verifying `B^T W^{-1} B = I`
    /// within `tol`.
    pub fn verified_orthonormal(vectors: DMatrix<f64>, w: &WeightMatrix, tol: f64) -> Result<Self> {
        let gram = gram_matrix(&vectors, w)?;
        let k = gram.nrows();
        let dev = (&gram - DMatrix::identity(k, k)).abs().max();
        if dev > tol {
            return Err(CalError::InvalidArgument(format!(
                "basis is not W-orthonormal: max Gram deviation {dev:.3e} > {tol:.1e}"
            )));
        }
        Ok(Self {
            vectors,
            w_orthonormal: true,
        })
    }

    /// Construct without re-checking; for callers that produced the columns
    /// from a factorization already guaranteeing orthonormality.
    pub(crate) fn orthonormal_unchecked(vectors: DMatrix<f64>) -> Self {
        Self {
            vectors,
            w_orthonormal: true,
        }
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn len(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.ncols() == 0
    }

    pub fn is_w_orthonormal(&self) -> bool {
        self.w_orthonormal
    }

    pub fn column(&self, i: usize) -> DVector<f64> {
        self.vectors.column(i).into_owned()
    }

    /// The first `k` columns.
    pub fn truncate(&self, k: usize) -> Basis {
        Basis {
            vectors: self.vectors.columns(0, k.min(self.len())).into_owned(),
            w_orthonormal: self.w_orthonormal,
        }
    }

    /// Concatenate columns of `self` and `other`.
    pub fn concat(&self, other: &Basis) -> Basis {
        let mut m = DMatrix::zeros(self.dim(), self.len() + other.len());
        m.columns_mut(0, self.len()).copy_from(&self.vectors);
        m.columns_mut(self.len(), other.len())
            .copy_from(&other.vectors);
        Basis::new(m)
    }
}

/// The squared W-norm `v^T W^{-1} v`.
pub fn w_norm(v: &DVector<f64>, w: &WeightMatrix) -> Result<f64> {
    w.quad_form(v)
}

fn gram_matrix(b: &DMatrix<f64>, w: &WeightMatrix) -> Result<DMatrix<f64>> {
    let winv_b = w.solve_mat(b)?;
    Ok(b.transpose() * winv_b)
}

/// Coefficients minimizing `||v - B c||_W`:
/// `c = (B^T W^{-1} B)^{-1} B^T W^{-1} v`.
pub fn w_project(b: &Basis, w: &WeightMatrix, v: &DVector<f64>) -> Result<DVector<f64>> {
    if b.dim() != v.len() {
        return Err(CalError::DimensionMismatch {
            expected: b.dim(),
            got: v.len(),
            context: "w_project vector length",
        });
    }
    let winv_b = w.solve_mat(b.vectors())?;
    let gram = b.vectors().transpose() * &winv_b;
    let rhs = winv_b.transpose() * v;
    solve_gram(gram, rhs)
}

/// Projection of every column of `m` at once; returns a `k x n` coefficient matrix.
pub fn w_project_matrix(b: &Basis, w: &WeightMatrix, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.dim() != m.nrows() {
        return Err(CalError::DimensionMismatch {
            expected: b.dim(),
            got: m.nrows(),
            context: "w_project_matrix row count",
        });
    }
    let winv_b = w.solve_mat(b.vectors())?;
    let gram = b.vectors().transpose() * &winv_b;
    let rhs = winv_b.transpose() * m;
    let chol = gram_cholesky(gram)?;
    Ok(chol.solve(&rhs))
}

fn solve_gram(gram: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    let chol = gram_cholesky(gram)?;
    Ok(chol.solve(&rhs))
}

// Cholesky of a Gram matrix with an explicit near-singularity check: a zero
// pivot can slip through the factorization and produce infinities in solves.
fn gram_cholesky(gram: DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let chol = nalgebra::Cholesky::new(gram).ok_or(CalError::RankDeficientBasis)?;
    let l = chol.l_dirty();
    let mut min_d = f64::INFINITY;
    let mut max_d = 0.0_f64;
    for i in 0..l.nrows() {
        min_d = min_d.min(l[(i, i)]);
        max_d = max_d.max(l[(i, i)]);
    }
    // Pivots of a rank-deficient Gram matrix decay like sqrt(machine eps).
    if !(min_d > 1e-7 * max_d) {
        return Err(CalError::RankDeficientBasis);
    }
    Ok(chol)
}

/// `B c + mu`.
pub fn reconstruct(b: &Basis, c: &DVector<f64>, mu: &DVector<f64>) -> Result<DVector<f64>> {
    if b.len() != c.len() {
        return Err(CalError::DimensionMismatch {
            expected: b.len(),
            got: c.len(),
            context: "reconstruct coefficient length",
        });
    }
    if b.dim() != mu.len() {
        return Err(CalError::DimensionMismatch {
            expected: b.dim(),
            got: mu.len(),
            context: "reconstruct mean length",
        });
    }
    Ok(b.vectors() * c + mu)
}

/// Reconstruction error `R_W(B, z) = ||z - B (B^T W^{-1} B)^{-1} B^T W^{-1} z||_W`.
///
/// `z` is expected to be pre-centred when a nonzero mean is in play.
pub fn reconstruction_error(b: &Basis, w: &WeightMatrix, z: &DVector<f64>) -> Result<f64> {
    if b.is_empty() {
        return w_norm(z, w);
    }
    let c = w_project(b, w, z)?;
    let residual = z - b.vectors() * c;
    w_norm(&residual, w)
}

/// Proportion of ensemble variability explained by projection onto the single
/// vector `b_k`.
pub fn variance_explained_single(
    b_k: &DVector<f64>,
    w: &WeightMatrix,
    centred: &DMatrix<f64>,
) -> Result<f64> {
    let single = Basis::new(DMatrix::from_column_slice(b_k.len(), 1, b_k.as_slice()));
    variance_explained_total(&single, w, centred)
}

/// Proportion of ensemble variability explained by `B`:
/// sum over runs of `||P_B f_j||_W` divided by sum of `||f_j||_W`.
pub fn variance_explained_total(
    b: &Basis,
    w: &WeightMatrix,
    centred: &DMatrix<f64>,
) -> Result<f64> {
    if b.dim() != centred.nrows() {
        return Err(CalError::DimensionMismatch {
            expected: b.dim(),
            got: centred.nrows(),
            context: "variance_explained field length",
        });
    }
    let mut denom = 0.0;
    for j in 0..centred.ncols() {
        denom += w.quad_form(&centred.column(j).into_owned())?;
    }
    if denom <= 0.0 {
        return Err(CalError::DegenerateEnsemble);
    }
    let coeffs = w_project_matrix(b, w, centred)?;
    let projected = b.vectors() * coeffs;
    let mut num = 0.0;
    for j in 0..projected.ncols() {
        num += w.quad_form(&projected.column(j).into_owned())?;
    }
    Ok(num / denom)
}

/// Gram-Schmidt orthonormalization with respect to the W-inner product.
///
/// The span of the first q output columns equals the span of the first q
/// input columns for every q, so truncated reconstruction errors are
/// unchanged. Errors on dependent columns.
pub fn gram_schmidt_w(b: &Basis, w: &WeightMatrix) -> Result<Basis> {
    gram_schmidt_impl(b, w, false)
}

/// As [`gram_schmidt_w`], but silently drops dependent columns instead of
/// erroring. Used when assembling search bases that may contain duplicated
/// directions.
pub fn gram_schmidt_w_drop(b: &Basis, w: &WeightMatrix) -> Result<Basis> {
    gram_schmidt_impl(b, w, true)
}

fn gram_schmidt_impl(b: &Basis, w: &WeightMatrix, drop_dependent: bool) -> Result<Basis> {
    let l = b.dim();
    let mut kept: Vec<DVector<f64>> = Vec::with_capacity(b.len());
    let mut leading_norm = 0.0_f64;
    for i in 0..b.len() {
        let mut v = b.column(i);
        // Two passes of classical GS for numerical stability.
        for _ in 0..2 {
            for u in &kept {
                let proj = w.inner(u, &v)?;
                v -= u * proj;
            }
        }
        let norm2 = w.quad_form(&v)?;
        if i == 0 {
            leading_norm = norm2.max(f64::MIN_POSITIVE);
        }
        if norm2 < 1e-12 * leading_norm {
            if drop_dependent {
                continue;
            }
            return Err(CalError::DependentColumn { index: i });
        }
        kept.push(v / norm2.sqrt());
    }
    let mut m = DMatrix::zeros(l, kept.len());
    for (i, u) in kept.iter().enumerate() {
        m.set_column(i, u);
    }
    Ok(Basis::orthonormal_unchecked(m))
}
