//! Gaussian-process emulation of basis coefficients and mapping of the
//! predictions back to field space with discarded-direction variance inflation.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::basis::{w_project_matrix, Basis};
use crate::ensemble::Ensemble;
use crate::error::{CalError, Result};
use crate::weight::WeightMatrix;
use crate::wsvd::residual_basis;

/// Mean-function regressors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regressors {
    Constant,
    /// Constant plus linear terms in every input (the default).
    Linear,
    /// User-selected monomials, each a list of `(input index, power)` factors.
    Monomials(Vec<Vec<(usize, u32)>>),
}

/// Hyperparameter fitting mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    Fixed { lengthscales: Vec<f64> },
    MaximumLikelihood,
}

/// Specification of a coefficient GP: squared-exponential correlation with
/// per-dimension lengthscales, a nugget, and a choice of regressors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpSpec {
    pub regressors: Regressors,
    pub nugget: f64,
    pub mode: FitMode,
}

impl Default for GpSpec {
    fn default() -> Self {
        Self {
            regressors: Regressors::Linear,
            nugget: 1e-6,
            mode: FitMode::MaximumLikelihood,
        }
    }
}

impl GpSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.nugget >= 0.0) {
            return Err(CalError::InvalidArgument("nugget must be >= 0".into()));
        }
        if let FitMode::Fixed { lengthscales } = &self.mode {
            if lengthscales.iter().any(|&p| !(p > 0.0)) {
                return Err(CalError::InvalidArgument(
                    "lengthscales must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

fn regressor_row(regressors: &Regressors, theta: &DVector<f64>) -> DVector<f64> {
    match regressors {
        Regressors::Constant => DVector::from_element(1, 1.0),
        Regressors::Linear => {
            let mut g = DVector::zeros(theta.len() + 1);
            g[0] = 1.0;
            for i in 0..theta.len() {
                g[i + 1] = theta[i];
            }
            g
        }
        Regressors::Monomials(terms) => {
            let mut g = DVector::zeros(terms.len());
            for (t, term) in terms.iter().enumerate() {
                let mut v = 1.0;
                for &(dim, pow) in term {
                    v *= theta[dim].powi(pow as i32);
                }
                g[t] = v;
            }
            g
        }
    }
}

fn regressor_count(regressors: &Regressors, p: usize) -> usize {
    match regressors {
        Regressors::Constant => 1,
        Regressors::Linear => p + 1,
        Regressors::Monomials(terms) => terms.len(),
    }
}

fn sq_exp_correlation(x: &DMatrix<f64>, lengthscales: &[f64], nugget: f64) -> DMatrix<f64> {
    let n = x.nrows();
    let mut r = DMatrix::zeros(n, n);
    for a in 0..n {
        r[(a, a)] = 1.0 + nugget;
        for b in (a + 1)..n {
            let mut s = 0.0;
            for d in 0..x.ncols() {
                let delta = (x[(a, d)] - x[(b, d)]) / lengthscales[d];
                s += delta * delta;
            }
            let v = (-s).exp();
            r[(a, b)] = v;
            r[(b, a)] = v;
        }
    }
    r
}

fn cross_correlation(
    x: &DMatrix<f64>,
    theta: &DVector<f64>,
    lengthscales: &[f64],
) -> DVector<f64> {
    let n = x.nrows();
    DVector::from_fn(n, |a, _| {
        let mut s = 0.0;
        for d in 0..x.ncols() {
            let delta = (x[(a, d)] - theta[d]) / lengthscales[d];
            s += delta * delta;
        }
        (-s).exp()
    })
}

/// Median-pairwise-distance lengthscale heuristic, per dimension.
fn median_lengthscales(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows();
    let p = x.ncols();
    let mut out = Vec::with_capacity(p);
    for d in 0..p {
        let mut dists = Vec::new();
        for a in 0..n {
            for b in (a + 1)..n {
                let v = (x[(a, d)] - x[(b, d)]).abs();
                if v > 0.0 {
                    dists.push(v);
                }
            }
        }
        if dists.is_empty() {
            out.push(1.0);
            continue;
        }
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.push(dists[dists.len() / 2].max(1e-3));
    }
    out
}

/// A fitted per-coefficient GP.
#[derive(Clone, Debug)]
pub struct CoefficientEmulator {
    pub spec: GpSpec,
    pub inputs: DMatrix<f64>,
    pub targets: DVector<f64>,
    pub beta: DVector<f64>,
    pub lengthscales: Vec<f64>,
    pub sigma2: f64,
    /// Set when ML optimization did not converge and the median-distance
    /// fallback was used.
    pub ml_fallback: bool,
    chol: Cholesky<f64, Dyn>,
    /// `V^{-1} (c - G beta)`.
    alpha: DVector<f64>,
}

/// Concentrated log-likelihood and its gradient with respect to the
/// lengthscales, with the regression coefficients and variance profiled out.
/// Exposed for diagnostics and gradient verification.
pub fn concentrated_loglik(
    x: &DMatrix<f64>,
    c: &DVector<f64>,
    g: &DMatrix<f64>,
    lengthscales: &[f64],
    nugget: f64,
) -> Result<(f64, Vec<f64>)> {
    let n = x.nrows() as f64;
    let v = sq_exp_correlation(x, lengthscales, nugget);
    let chol = Cholesky::new(v.clone()).ok_or(CalError::NonPdCovariance)?;
    let vinv_g = chol.solve(g);
    let gtg = g.transpose() * &vinv_g;
    let beta_chol = Cholesky::new(gtg).ok_or(CalError::RankDeficientBasis)?;
    let beta = beta_chol.solve(&(vinv_g.transpose() * c));
    let resid = c - g * &beta;
    let alpha = chol.solve(&resid);
    let sigma2 = (resid.dot(&alpha) / n).max(1e-300);

    let mut logdet = 0.0;
    let l = chol.l_dirty();
    for i in 0..l.nrows() {
        logdet += 2.0 * l[(i, i)].ln();
    }
    let ll = -0.5 * n * sigma2.ln() - 0.5 * logdet;

    let vinv = chol.inverse();
    let mut grad = Vec::with_capacity(lengthscales.len());
    for (j, &phi) in lengthscales.iter().enumerate() {
        // dV_ab/dphi_j = V_ab * 2 delta_j^2 / phi_j^3 (nugget term constant)
        let nrows = x.nrows();
        let mut dv = DMatrix::zeros(nrows, nrows);
        for a in 0..nrows {
            for b in (a + 1)..nrows {
                let delta = x[(a, j)] - x[(b, j)];
                let val = v[(a, b)] * 2.0 * delta * delta / (phi * phi * phi);
                dv[(a, b)] = val;
                dv[(b, a)] = val;
            }
        }
        let quad = alpha.dot(&(&dv * &alpha));
        let trace = (&vinv * &dv).trace();
        grad.push(quad / (2.0 * sigma2) - 0.5 * trace);
    }
    Ok((ll, grad))
}

fn fit_lengthscales_ml(
    x: &DMatrix<f64>,
    c: &DVector<f64>,
    g: &DMatrix<f64>,
    nugget: f64,
) -> Result<(Vec<f64>, bool)> {
    let start = median_lengthscales(x);
    let mut log_phi: Vec<f64> = start.iter().map(|p| p.ln()).collect();
    let p = log_phi.len();

    let eval = |log_phi: &[f64]| -> Result<(f64, Vec<f64>)> {
        let phi: Vec<f64> = log_phi.iter().map(|l| l.exp()).collect();
        let (ll, grad) = concentrated_loglik(x, c, g, &phi, nugget)?;
        // chain rule to log-space
        let grad_log: Vec<f64> = grad.iter().zip(&phi).map(|(g, p)| g * p).collect();
        Ok((ll, grad_log))
    };

    let (mut ll, mut grad) = match eval(&log_phi) {
        Ok(v) => v,
        Err(_) => return Ok((start, true)),
    };
    let mut converged = false;
    for _ in 0..200 {
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < 1e-6 {
            converged = true;
            break;
        }
        let mut step = 0.5;
        let mut improved = false;
        while step > 1e-8 {
            let cand: Vec<f64> = log_phi
                .iter()
                .zip(&grad)
                .map(|(l, g)| (l + step * g / gnorm.max(1.0)).clamp(-6.0, 6.0))
                .collect();
            if let Ok((cand_ll, cand_grad)) = eval(&cand) {
                if cand_ll > ll + 1e-12 {
                    log_phi = cand;
                    ll = cand_ll;
                    grad = cand_grad;
                    improved = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !improved {
            converged = true; // local optimum within line-search resolution
            break;
        }
        let _ = p;
    }
    let phi: Vec<f64> = log_phi.iter().map(|l| l.exp()).collect();
    Ok((phi, !converged))
}

impl CoefficientEmulator {
    /// Fit a GP to one coefficient series over the design.
    pub fn fit(
        inputs: &DMatrix<f64>,
        targets: &DVector<f64>,
        spec: &GpSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let n = inputs.nrows();
        if targets.len() != n {
            return Err(CalError::DimensionMismatch {
                expected: n,
                got: targets.len(),
                context: "coefficient emulator target length",
            });
        }
        let n_reg = regressor_count(&spec.regressors, inputs.ncols());
        if n < n_reg {
            return Err(CalError::InvalidArgument(format!(
                "need at least {n_reg} runs for {n_reg} regressors, got {n}"
            )));
        }

        let g_train = DMatrix::from_fn(n, n_reg, |a, b| {
            regressor_row(&spec.regressors, &inputs.row(a).transpose())[b]
        });

        let (lengthscales, ml_fallback) = match &spec.mode {
            FitMode::Fixed { lengthscales } => {
                // A single value broadcasts to all input dimensions, mirroring
                // the shared lengthscale of the maximum-likelihood mode.
                if lengthscales.len() == 1 {
                    (vec![lengthscales[0]; inputs.ncols()], false)
                } else if lengthscales.len() != inputs.ncols() {
                    return Err(CalError::DimensionMismatch {
                        expected: inputs.ncols(),
                        got: lengthscales.len(),
                        context: "fixed lengthscale count",
                    });
                } else {
                    (lengthscales.clone(), false)
                }
            }
            FitMode::MaximumLikelihood => fit_lengthscales_ml(inputs, targets, &g_train, spec.nugget)?,
        };

        let v = sq_exp_correlation(inputs, &lengthscales, spec.nugget);
        check_condition(&v)?;
        let chol = Cholesky::new(v).ok_or(CalError::NonPdCovariance)?;
        let vinv_g = chol.solve(&g_train);
        let gtg = g_train.transpose() * &vinv_g;
        let beta_chol = Cholesky::new(gtg).ok_or(CalError::RankDeficientBasis)?;
        let beta = beta_chol.solve(&(vinv_g.transpose() * targets));
        let resid = targets - &g_train * &beta;
        let alpha = chol.solve(&resid);
        let sigma2 = (resid.dot(&alpha) / n as f64).max(0.0);

        Ok(Self {
            spec: spec.clone(),
            inputs: inputs.clone(),
            targets: targets.clone(),
            beta,
            lengthscales,
            sigma2,
            ml_fallback,
            chol,
            alpha,
        })
    }

    /// Posterior mean at `theta`.
    pub fn predict_mean(&self, theta: &DVector<f64>) -> f64 {
        let g = regressor_row(&self.spec.regressors, theta);
        let k = cross_correlation(&self.inputs, theta, &self.lengthscales);
        g.dot(&self.beta) + k.dot(&self.alpha)
    }

    /// Posterior variance at `theta` (clamped at a small negative tolerance).
    pub fn predict_var(&self, theta: &DVector<f64>) -> Result<f64> {
        let k = cross_correlation(&self.inputs, theta, &self.lengthscales);
        let vinv_k = self.chol.solve(&k);
        let raw = self.sigma2 * (1.0 + self.spec.nugget - k.dot(&vinv_k));
        if raw < -1e-10 {
            return Err(CalError::InvalidArgument(format!(
                "negative posterior variance {raw}"
            )));
        }
        Ok(raw.max(0.0))
    }

    /// Closed-form leave-one-out standardized errors.
    pub fn loo_standardized_errors(&self) -> Vec<f64> {
        let vinv = self.chol.inverse();
        let n = self.targets.len();
        (0..n)
            .map(|i| {
                let precision = vinv[(i, i)].max(1e-300);
                let err = self.alpha[i] / precision;
                let var = self.sigma2 / precision;
                err / var.sqrt().max(1e-300)
            })
            .collect()
    }
}

fn check_condition(v: &DMatrix<f64>) -> Result<()> {
    let eig = v.clone().symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if condition > 1e12 {
        return Err(CalError::IllConditioned { condition });
    }
    Ok(())
}

/// Low-rank field covariance: `G_q diag(var_c) G_q^T + G_-q S_-q G_-q^T`.
#[derive(Clone, Debug)]
pub struct LowRankCovariance {
    pub basis: DMatrix<f64>,
    pub coeff_vars: DVector<f64>,
    pub discarded: DMatrix<f64>,
    pub discarded_vars: DVector<f64>,
}

impl LowRankCovariance {
    /// Densify; intended for verification at small field sizes.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = &self.basis * DMatrix::from_diagonal(&self.coeff_vars) * self.basis.transpose();
        if self.discarded.ncols() > 0 {
            m += &self.discarded
                * DMatrix::from_diagonal(&self.discarded_vars)
                * self.discarded.transpose();
        }
        m
    }

    pub fn trace(&self) -> f64 {
        let mut t = 0.0;
        for j in 0..self.basis.ncols() {
            t += self.coeff_vars[j] * self.basis.column(j).norm_squared();
        }
        for j in 0..self.discarded.ncols() {
            t += self.discarded_vars[j] * self.discarded.column(j).norm_squared();
        }
        t
    }
}

/// Basis emulator: one GP per retained coefficient plus the discarded
/// directions used for variance inflation.
#[derive(Clone, Debug)]
pub struct FieldEmulator {
    pub basis: Basis,
    pub coefficient_emulators: Vec<CoefficientEmulator>,
    pub discarded: DMatrix<f64>,
    pub discarded_vars: DVector<f64>,
    pub mean: DVector<f64>,
}

impl FieldEmulator {
    pub fn q(&self) -> usize {
        self.coefficient_emulators.len()
    }

    pub fn field_len(&self) -> usize {
        self.mean.len()
    }

    /// Per-coefficient posterior means and variances at `theta`.
    pub fn predict_coefficients(&self, theta: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        if self.coefficient_emulators.is_empty() {
            return Err(CalError::UnfittedEmulator);
        }
        let q = self.q();
        let mut mean = DVector::zeros(q);
        let mut var = DVector::zeros(q);
        for (i, em) in self.coefficient_emulators.iter().enumerate() {
            mean[i] = em.predict_mean(theta);
            var[i] = em.predict_var(theta)?;
        }
        Ok((mean, var))
    }

    /// Field-space posterior mean and covariance in low-rank form.
    pub fn predict_field(&self, theta: &DVector<f64>) -> Result<(DVector<f64>, LowRankCovariance)> {
        let (c_mean, c_var) = self.predict_coefficients(theta)?;
        let mean = self.basis.vectors() * &c_mean + &self.mean;
        let cov = LowRankCovariance {
            basis: self.basis.vectors().clone(),
            coeff_vars: c_var,
            discarded: self.discarded.clone(),
            discarded_vars: self.discarded_vars.clone(),
        };
        Ok((mean, cov))
    }

    /// Fraction of leave-one-out standardized errors within +-3, per
    /// coefficient.
    pub fn loo_validate(&self) -> Vec<f64> {
        self.coefficient_emulators
            .iter()
            .map(|em| {
                let errs = em.loo_standardized_errors();
                let within = errs.iter().filter(|e| e.abs() <= 3.0).count();
                within as f64 / errs.len().max(1) as f64
            })
            .collect()
    }
}

/// Project the centred ensemble onto a W-orthonormal basis and fit one GP per
/// coefficient; the residual directions and their eigenvalue-scale variances
/// become the discarded set.
pub fn fit_coefficient_emulators(
    ensemble: &Ensemble,
    basis: &Basis,
    w: &WeightMatrix,
    spec: &GpSpec,
) -> Result<FieldEmulator> {
    let coeffs = w_project_matrix(basis, w, ensemble.centred())?; // q x n
    let mut emulators = Vec::with_capacity(basis.len());
    for i in 0..basis.len() {
        let targets = coeffs.row(i).transpose();
        emulators.push(CoefficientEmulator::fit(ensemble.design(), &targets, spec)?);
    }
    let (discarded, discarded_vars) = match residual_basis(ensemble.centred(), basis, w) {
        Ok(res) => {
            let vars = res.coefficient_variances(ensemble.n_runs());
            (res.basis.vectors().clone(), vars)
        }
        Err(CalError::DegenerateEnsemble) => {
            (DMatrix::zeros(ensemble.field_len(), 0), DVector::zeros(0))
        }
        Err(e) => return Err(e),
    };
    Ok(FieldEmulator {
        basis: basis.clone(),
        coefficient_emulators: emulators,
        discarded,
        discarded_vars,
        mean: ensemble.mean().clone(),
    })
}
