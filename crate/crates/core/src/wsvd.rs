//! Generalized (weighted) SVD of the centred ensemble, and residual bases.
//!
//! The decomposition `F_mu^T = U D B^T` with `B^T W^{-1} B = I` is realized by
//! whitening: factor `W = L L^T`, take the standard SVD of `L^{-1} F_mu`, and
//! map the left singular vectors back through `L`.

use nalgebra::{DMatrix, DVector};

use crate::basis::{w_project_matrix, Basis};
use crate::error::{CalError, Result};
use crate::weight::WeightMatrix;

/// Relative cutoff below which singular values are treated as zero.
const SV_CUTOFF: f64 = 1e-10;

/// Result of a weighted SVD: W-orthonormal right vectors, orthonormal left
/// vectors and nonincreasing singular values.
#[derive(Clone, Debug)]
pub struct WsvdResult {
    pub basis: Basis,
    /// `n x k` matrix with orthonormal columns (`U` in `F_mu^T = U D B^T`).
    pub left: DMatrix<f64>,
    pub singular_values: DVector<f64>,
}

impl WsvdResult {
    /// Eigenvalue-scale variances `d_i^2 / (n - 1)` of the projected
    /// coefficients, used for discarded-direction inflation.
    pub fn coefficient_variances(&self, n_runs: usize) -> DVector<f64> {
        let denom = (n_runs.max(2) - 1) as f64;
        self.singular_values.map(|d| d * d / denom)
    }
}

/// Weighted SVD of a centred ensemble.
///
/// Returns only directions with nonzero singular values (relative cutoff
/// 1e-10); a degenerate ensemble yields an explicit error rather than NaNs.
///
/// Uses a one-sided Jacobi SVD on the whitened matrix. Jacobi only ever
/// rotates columns, so every returned direction is an exact linear
/// combination of ensemble members — truncated bases stay inside the
/// ensemble span even for near-rank-deficient input, where bidiagonal
/// SVD routines can leak null-space components into kept vectors.
pub fn wsvd(centred: &DMatrix<f64>, w: &WeightMatrix) -> Result<WsvdResult> {
    if centred.nrows() != w.dim() {
        return Err(CalError::DimensionMismatch {
            expected: w.dim(),
            got: centred.nrows(),
            context: "wsvd field length",
        });
    }
    let whitened = w.whiten(centred)?;
    let (p_scaled, v, sv) = jacobi_svd(&whitened);
    let max_sv = sv.max();
    if !(max_sv > 0.0) || !max_sv.is_finite() {
        return Err(CalError::DegenerateEnsemble);
    }
    let keep: Vec<usize> = (0..sv.len())
        .filter(|&i| sv[i] > SV_CUTOFF * max_sv)
        .collect();
    if keep.is_empty() {
        return Err(CalError::DegenerateEnsemble);
    }

    // B = L * (A V) / d restricted to kept columns; U = V.
    let l_factor = w.chol_l();
    let mut basis = DMatrix::zeros(centred.nrows(), keep.len());
    let mut left = DMatrix::zeros(centred.ncols(), keep.len());
    let mut values = DVector::zeros(keep.len());
    for (out, &i) in keep.iter().enumerate() {
        let b_col = (&l_factor * p_scaled.column(i)) / sv[i];
        basis.set_column(out, &b_col);
        left.set_column(out, &v.column(i));
        values[out] = sv[i];
    }
    fix_signs(&mut basis, &mut left);
    Ok(WsvdResult {
        basis: Basis::orthonormal_unchecked(basis),
        left,
        singular_values: values,
    })
}

/// One-sided Jacobi SVD of `a` (`m x n`): returns `(A V, V, d)` with the
/// columns of `A V` mutually orthogonal, `V` orthogonal and `d` the column
/// norms of `A V` (the singular values), sorted nonincreasing.
fn jacobi_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let n = a.ncols();
    let mut u = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let tol = 1e-15;
    for _ in 0..60 {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let alpha = u.column(i).dot(&u.column(i));
                let beta = u.column(j).dot(&u.column(j));
                let gamma = u.column(i).dot(&u.column(j));
                if gamma.abs() <= tol * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut u, &mut v] {
                    for r in 0..mat.nrows() {
                        let x = mat[(r, i)];
                        let y = mat[(r, j)];
                        mat[(r, i)] = c * x - s * y;
                        mat[(r, j)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|i| u.column(i).norm()).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());
    let mut u_sorted = DMatrix::zeros(u.nrows(), n);
    let mut v_sorted = DMatrix::zeros(n, n);
    let mut d = DVector::zeros(n);
    for (out, &i) in order.iter().enumerate() {
        u_sorted.set_column(out, &u.column(i));
        v_sorted.set_column(out, &v.column(i));
        d[out] = norms[i];
    }
    (u_sorted, v_sorted, d)
}

// Make each basis vector's largest-magnitude entry positive; flip the matching
// left vector so the product is unchanged.
fn fix_signs(basis: &mut DMatrix<f64>, left: &mut DMatrix<f64>) {
    for j in 0..basis.ncols() {
        let col = basis.column(j);
        let mut max_abs = 0.0;
        let mut max_val = 0.0;
        for &x in col.iter() {
            if x.abs() > max_abs {
                max_abs = x.abs();
                max_val = x;
            }
        }
        if max_val < 0.0 {
            basis.column_mut(j).neg_mut();
            left.column_mut(j).neg_mut();
        }
    }
}

/// Residual basis: weighted SVD of the ensemble after removing the part
/// explained by `b_p`. The returned basis is W-orthogonal to `b_p`; directions
/// with near-zero singular values are dropped.
pub fn residual_basis(
    centred: &DMatrix<f64>,
    b_p: &Basis,
    w: &WeightMatrix,
) -> Result<WsvdResult> {
    if b_p.is_empty() {
        return wsvd(centred, w);
    }
    let coeffs = w_project_matrix(b_p, w, centred)?;
    let residual = centred - b_p.vectors() * coeffs;
    if residual.norm() <= SV_CUTOFF * centred.norm() {
        return Err(CalError::DegenerateEnsemble);
    }
    wsvd(&residual, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{reconstruction_error, variance_explained_total};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_spd_weight(rng: &mut ChaCha8Rng, dim: usize) -> WeightMatrix {
        let a = random_matrix(rng, dim, dim);
        let m = &a * a.transpose() + DMatrix::identity(dim, dim) * 0.5;
        WeightMatrix::dense(m).unwrap()
    }

    #[test]
    fn identity_weight_reduces_to_standard_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_matrix(&mut rng, 6, 4);
        let w = WeightMatrix::identity(6);
        let result = wsvd(&f, &w).unwrap();
        let reference = f.clone().svd(true, false);
        let mut ref_sv: Vec<f64> = reference.singular_values.iter().cloned().collect();
        ref_sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (i, &s) in ref_sv.iter().take(result.singular_values.len()).enumerate() {
            assert_relative_eq!(result.singular_values[i], s, max_relative = 1e-10);
        }
    }

    #[test]
    fn rank_one_ensemble() {
        let v = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        let mut f = DMatrix::zeros(3, 3);
        for j in 0..3 {
            f.set_column(j, &(&v * (j as f64 + 1.0 - 2.0)));
        }
        let w = WeightMatrix::identity(3);
        let result = wsvd(&f, &w).unwrap();
        assert_eq!(result.singular_values.len(), 1);
    }

    #[test]
    fn round_trip_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_matrix(&mut rng, 6, 4);
        let w = random_spd_weight(&mut rng, 6);
        let r = wsvd(&f, &w).unwrap();
        // F_mu^T = U D B^T
        let d = DMatrix::from_diagonal(&r.singular_values);
        let recon = &r.left * d * r.basis.vectors().transpose();
        let err = (recon - f.transpose()).norm() / f.norm();
        assert!(err < 1e-8, "round trip relative error {err}");
    }

    #[test]
    fn orthonormality_and_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_matrix(&mut rng, 8, 5);
        let w = random_spd_weight(&mut rng, 8);
        let r = wsvd(&f, &w).unwrap();
        let gram = r.basis.vectors().transpose() * w.solve_mat(r.basis.vectors()).unwrap();
        let k = gram.nrows();
        assert!((gram - DMatrix::identity(k, k)).abs().max() < 1e-8);
        for i in 1..r.singular_values.len() {
            assert!(r.singular_values[i] <= r.singular_values[i - 1] + 1e-12);
        }
        // full basis explains everything
        assert_relative_eq!(
            variance_explained_total(&r.basis, &w, &f).unwrap(),
            1.0,
            epsilon = 1e-8
        );
    }

    #[test]
    fn degenerate_ensemble_reports_error() {
        let f = DMatrix::zeros(4, 3);
        let w = WeightMatrix::identity(4);
        assert!(matches!(wsvd(&f, &w), Err(CalError::DegenerateEnsemble)));
    }

    #[test]
    fn residual_basis_is_w_orthogonal_to_parent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = random_matrix(&mut rng, 10, 5);
        let w = random_spd_weight(&mut rng, 10);
        let full = wsvd(&f, &w).unwrap();
        let b_p = full.basis.truncate(2);
        let resid = residual_basis(&f, &b_p, &w).unwrap();
        let cross = b_p.vectors().transpose() * w.solve_mat(resid.basis.vectors()).unwrap();
        assert!(cross.abs().max() < 1e-8, "cross Gram {}", cross.abs().max());
    }

    #[test]
    fn residual_of_spanning_basis_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let f = random_matrix(&mut rng, 6, 4);
        let w = WeightMatrix::identity(6);
        let full = wsvd(&f, &w).unwrap();
        assert!(matches!(
            residual_basis(&f, &full.basis, &w),
            Err(CalError::DegenerateEnsemble)
        ));
    }

    #[test]
    fn residual_with_empty_parent_equals_wsvd() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let f = random_matrix(&mut rng, 6, 4);
        let w = WeightMatrix::identity(6);
        let empty = Basis::new(DMatrix::zeros(6, 0));
        let a = residual_basis(&f, &empty, &w).unwrap();
        let b = wsvd(&f, &w).unwrap();
        assert_relative_eq!(a.singular_values, b.singular_values, max_relative = 1e-12);
    }

    #[test]
    fn appending_columns_never_increases_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let f = random_matrix(&mut rng, 8, 5);
        let w = random_spd_weight(&mut rng, 8);
        let z = DVector::from_fn(8, |_, _| rng.gen_range(-1.0..1.0));
        let full = wsvd(&f, &w).unwrap();
        let mut prev = f64::INFINITY;
        for k in 1..=full.basis.len() {
            let err = reconstruction_error(&full.basis.truncate(k), &w, &z).unwrap();
            assert!(err <= prev + 1e-9);
            prev = err;
        }
    }
}
