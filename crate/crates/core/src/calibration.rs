//! Implausibility, thresholds, NROY estimation, discrepancy rescaling, and the
//! 1-D iterative probabilistic-calibration demo.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::emulator::{
    CoefficientEmulator, FieldEmulator, FitMode, GpSpec, Regressors,
};
use crate::error::{CalError, Result};
use crate::weight::WeightMatrix;

/// Observation error and structural discrepancy covariances.
#[derive(Clone, Debug)]
pub struct UncertaintySpec {
    pub sigma_e: WeightMatrix,
    pub sigma_eta: WeightMatrix,
}

impl UncertaintySpec {
    pub fn new(sigma_e: WeightMatrix, sigma_eta: WeightMatrix) -> Result<Self> {
        if sigma_e.dim() != sigma_eta.dim() {
            return Err(CalError::DimensionMismatch {
                expected: sigma_e.dim(),
                got: sigma_eta.dim(),
                context: "uncertainty spec dimensions",
            });
        }
        Ok(Self { sigma_e, sigma_eta })
    }

    pub fn dim(&self) -> usize {
        self.sigma_e.dim()
    }

    pub fn total_dense(&self) -> DMatrix<f64> {
        self.sigma_e.to_dense() + self.sigma_eta.to_dense()
    }
}

/// Quantile of the chi-squared distribution with `dof` degrees of freedom.
pub fn chi2_threshold(dof: usize, level: f64) -> Result<f64> {
    if dof == 0 {
        return Err(CalError::InvalidArgument("dof must be >= 1".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(CalError::InvalidLevel(level));
    }
    let dist = ChiSquared::new(dof as f64)
        .map_err(|e| CalError::InvalidArgument(e.to_string()))?;
    let mut x = dist.inverse_cdf(level);
    // polish the generic bisection result with Newton steps on the CDF
    for _ in 0..8 {
        let pdf = statrs::distribution::Continuous::pdf(&dist, x);
        if pdf <= 0.0 {
            break;
        }
        let step = (dist.cdf(x) - level) / pdf;
        x -= step;
        if step.abs() < 1e-12 * x.abs() {
            break;
        }
    }
    Ok(x)
}

/// Precomputed solver for `r^T (A + G diag(v) G^T)^{-1} r` where
/// `A = Sigma_e + Sigma_eta + G_-q S_-q G_-q^T` does not depend on theta and
/// only the retained-coefficient variances `v` change per evaluation.
pub struct ImplausibilitySolver {
    ainv_basis: DMatrix<f64>,
    basis_gram: DMatrix<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
    log_det_a: f64,
    dim: usize,
}

impl ImplausibilitySolver {
    pub fn new(em: &FieldEmulator, u: &UncertaintySpec) -> Result<Self> {
        let l = em.field_len();
        if u.dim() != l {
            return Err(CalError::DimensionMismatch {
                expected: l,
                got: u.dim(),
                context: "implausibility covariance dimension",
            });
        }
        let mut a = u.total_dense();
        if em.discarded.ncols() > 0 {
            a += &em.discarded
                * DMatrix::from_diagonal(&em.discarded_vars)
                * em.discarded.transpose();
        }
        let chol = Cholesky::new(a).ok_or(CalError::NonPdCovariance)?;
        let ainv_basis = chol.solve(em.basis.vectors());
        let basis_gram = em.basis.vectors().transpose() * &ainv_basis;
        let mut log_det_a = 0.0;
        let lf = chol.l_dirty();
        for i in 0..l {
            log_det_a += 2.0 * lf[(i, i)].ln();
        }
        Ok(Self {
            ainv_basis,
            basis_gram,
            chol,
            log_det_a,
            dim: l,
        })
    }

    /// Mahalanobis form of `resid` against `A + G diag(coeff_vars) G^T`.
    ///
    /// The Woodbury update is applied through symmetric square-root scaling so
    /// zero coefficient variances are handled without forming `diag(v)^{-1}`.
    pub fn quad_form(&self, resid: &DVector<f64>, coeff_vars: &DVector<f64>) -> Result<f64> {
        let (quad, _) = self.quad_and_logdet(resid, coeff_vars)?;
        Ok(quad)
    }

    /// Quadratic form together with the log determinant of the total
    /// covariance, for Gaussian density evaluation.
    pub fn quad_and_logdet(
        &self,
        resid: &DVector<f64>,
        coeff_vars: &DVector<f64>,
    ) -> Result<(f64, f64)> {
        if resid.len() != self.dim {
            return Err(CalError::DimensionMismatch {
                expected: self.dim,
                got: resid.len(),
                context: "implausibility residual length",
            });
        }
        let q = coeff_vars.len();
        let ainv_r = self.chol.solve(resid);
        let base = resid.dot(&ainv_r);
        if q == 0 {
            return Ok((base, self.log_det_a));
        }
        let s = coeff_vars.map(|v| v.max(0.0).sqrt());
        // M = I + S G^T A^{-1} G S  (q x q, SPD)
        let mut m = DMatrix::identity(q, q);
        for a in 0..q {
            for b in 0..q {
                m[(a, b)] += s[a] * self.basis_gram[(a, b)] * s[b];
            }
        }
        let m_chol = Cholesky::new(m).ok_or(CalError::NonPdCovariance)?;
        let mut u = self.ainv_basis.transpose() * resid; // G^T A^{-1} r
        for i in 0..q {
            u[i] *= s[i];
        }
        let correction = u.dot(&m_chol.solve(&u));
        let mut log_det = self.log_det_a;
        let lf = m_chol.l_dirty();
        for i in 0..q {
            log_det += 2.0 * lf[(i, i)].ln();
        }
        Ok((base - correction, log_det))
    }
}

/// Field-space implausibility of Eq-3 form, solved via the low-rank structure.
pub fn implausibility_field(
    em: &FieldEmulator,
    theta: &DVector<f64>,
    z: &DVector<f64>,
    u: &UncertaintySpec,
) -> Result<f64> {
    let solver = ImplausibilitySolver::new(em, u)?;
    implausibility_field_with(em, &solver, theta, z)
}

/// As [`implausibility_field`] with a reusable precomputed solver (the batch
/// hot path).
pub fn implausibility_field_with(
    em: &FieldEmulator,
    solver: &ImplausibilitySolver,
    theta: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<f64> {
    let (mean, c_var) = predict_mean_and_vars(em, theta)?;
    let resid = z - mean;
    solver.quad_form(&resid, &c_var)
}

fn predict_mean_and_vars(
    em: &FieldEmulator,
    theta: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let (c_mean, c_var) = em.predict_coefficients(theta)?;
    let mean = em.basis.vectors() * c_mean + &em.mean;
    Ok((mean, c_var))
}

/// Coefficient-space implausibility: everything projected by the plain basis
/// transpose and thresholded with `q` degrees of freedom.
pub fn implausibility_coeff(
    em: &FieldEmulator,
    theta: &DVector<f64>,
    z: &DVector<f64>,
    u: &UncertaintySpec,
) -> Result<f64> {
    let g = em.basis.vectors();
    let (c_mean, c_var) = em.predict_coefficients(theta)?;
    let z_proj = g.transpose() * (z - &em.mean);
    let resid = z_proj - c_mean;
    let projected = g.transpose() * u.total_dense() * g;
    let total = projected + DMatrix::from_diagonal(&c_var);
    let chol = Cholesky::new(total).ok_or(CalError::NonPdCovariance)?;
    Ok(resid.dot(&chol.solve(&resid)))
}

/// Monte Carlo sampling configuration for history matching.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_samples: 100_000,
            seed: 0,
        }
    }
}

/// A previous wave's acceptance rule, used for iterative refocussing.
pub struct WaveConstraint<'a> {
    pub emulator: &'a FieldEmulator,
    pub uncertainty: &'a UncertaintySpec,
    pub z: &'a DVector<f64>,
    pub threshold: f64,
}

/// Outcome of one history-matching wave.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WaveResult {
    pub threshold: f64,
    pub nroy_fraction: f64,
    pub standard_error: f64,
    pub sample_count: usize,
    pub seed: u64,
    /// Retained samples: rows are theta vectors.
    pub retained: Vec<Vec<f64>>,
    pub retained_implausibility: Vec<f64>,
    /// Set when no sample survived; a possible terminal case.
    pub empty_nroy: bool,
}

/// One wave of history matching: uniform Monte Carlo over `[-1,1]^p`, with
/// samples first filtered through every parent wave's acceptance rule so the
/// reported fraction is always a fraction of the full input space.
pub fn history_match(
    em: &FieldEmulator,
    z: &DVector<f64>,
    u: &UncertaintySpec,
    threshold: f64,
    sampler: &SamplerConfig,
    parents: &[WaveConstraint<'_>],
) -> Result<WaveResult> {
    if sampler.n_samples == 0 {
        return Err(CalError::InvalidArgument("n_samples must be >= 1".into()));
    }
    let p = em.coefficient_emulators[0].inputs.ncols();
    let solver = ImplausibilitySolver::new(em, u)?;
    let parent_solvers: Vec<ImplausibilitySolver> = parents
        .iter()
        .map(|c| ImplausibilitySolver::new(c.emulator, c.uncertainty))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut retained = Vec::new();
    let mut retained_impl = Vec::new();
    let mut accepted = 0usize;
    for _ in 0..sampler.n_samples {
        let theta = DVector::from_fn(p, |_, _| rng.gen_range(-1.0..1.0));
        let mut in_parents = true;
        for (c, s) in parents.iter().zip(&parent_solvers) {
            let i_parent = implausibility_field_with(c.emulator, s, &theta, c.z)?;
            if i_parent > c.threshold {
                in_parents = false;
                break;
            }
        }
        if !in_parents {
            continue;
        }
        let i_val = implausibility_field_with(em, &solver, &theta, z)?;
        if i_val <= threshold {
            accepted += 1;
            if retained.len() < 10_000 {
                retained.push(theta.iter().cloned().collect());
                retained_impl.push(i_val);
            }
        }
    }
    let n = sampler.n_samples as f64;
    let frac = accepted as f64 / n;
    Ok(WaveResult {
        threshold,
        nroy_fraction: frac,
        standard_error: (frac * (1.0 - frac) / n).sqrt(),
        sample_count: sampler.n_samples,
        seed: sampler.seed,
        retained,
        retained_implausibility: retained_impl,
        empty_nroy: accepted == 0,
    })
}

/// Select a space-filling `n`-point design among retained NROY samples:
/// a seeded random subset is thinned greedily by the maximin criterion.
/// Returns the design as one row per run.
pub fn nroy_design(retained: &[Vec<f64>], n: usize, seed: u64) -> Result<DMatrix<f64>> {
    if retained.is_empty() {
        return Err(CalError::InvalidArgument(
            "cannot build a design from an empty NROY sample".into(),
        ));
    }
    let p = retained[0].len();
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..retained.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(3000.min(idx.len()));
    let pts: Vec<DVector<f64>> = idx
        .iter()
        .map(|&i| DVector::from_column_slice(&retained[i]))
        .collect();
    let mut chosen: Vec<usize> = vec![0];
    while chosen.len() < n.min(pts.len()) {
        let mut best = (0usize, -1.0f64);
        for (i, pt) in pts.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&c| (pt - &pts[c]).norm())
                .fold(f64::INFINITY, f64::min);
            if d > best.1 {
                best = (i, d);
            }
        }
        chosen.push(best.0);
    }
    let mut m = DMatrix::zeros(chosen.len(), p);
    for (r, &i) in chosen.iter().enumerate() {
        m.set_row(r, &pts[i].transpose());
    }
    Ok(m)
}

/// Rescale the discrepancy covariance so the basis reconstruction of the
/// observations is not ruled out: `Sigma_eta = (R/b) W` with `b` the level-`j`
/// chi-squared quantile at `ell` degrees of freedom.
pub fn discrepancy_rescale(
    recon_error: f64,
    w: &WeightMatrix,
    ell: usize,
    j: f64,
) -> Result<WeightMatrix> {
    if !(j > 0.0 && j < 0.995) {
        return Err(CalError::InvalidLevel(j));
    }
    let b = chi2_threshold(ell, j)?;
    w.scaled(recon_error / b)
}

/// Un-normalized log posterior density of `theta` given observations `z`:
/// Gaussian log-likelihood with the full low-rank covariance plus log prior.
pub fn log_posterior_density(
    em: &FieldEmulator,
    solver: &ImplausibilitySolver,
    theta: &DVector<f64>,
    z: &DVector<f64>,
    log_prior: f64,
) -> Result<f64> {
    let (mean, c_var) = predict_mean_and_vars(em, theta)?;
    let resid = z - mean;
    let (quad, log_det) = solver.quad_and_logdet(&resid, &c_var)?;
    let l = z.len() as f64;
    Ok(-0.5 * (quad + log_det + l * (2.0 * std::f64::consts::PI).ln()) + log_prior)
}

/// Exponentiated [`log_posterior_density`] with a uniform prior over
/// `[-1,1]^p`, zero outside the box.
pub fn posterior_density(
    em: &FieldEmulator,
    theta: &DVector<f64>,
    z: &DVector<f64>,
    u: &UncertaintySpec,
) -> Result<f64> {
    if theta.iter().any(|t| t.abs() > 1.0) {
        return Ok(0.0);
    }
    let solver = ImplausibilitySolver::new(em, u)?;
    let log_prior = -(theta.len() as f64) * 2.0f64.ln();
    Ok(log_posterior_density(em, &solver, theta, z, log_prior)?.exp())
}

/// One step of the 1-D iterative calibration demo.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibStep {
    pub design: Vec<(f64, f64)>,
    pub map: f64,
    pub grid: Vec<f64>,
    pub posterior: Vec<f64>,
    /// Width of the central 95% posterior interval on the grid.
    pub width95: f64,
}

/// Iterative probabilistic calibration of a cheap scalar function: starting
/// from an equally spaced 6-point design, each step refits a fixed-lengthscale
/// GP, computes the posterior for the best input over a grid, evaluates the
/// function at the MAP, and appends the new run.
pub fn iterative_calibration_demo(
    f: &dyn Fn(f64) -> f64,
    z: f64,
    total_error_var: f64,
    lengthscale: f64,
    steps: usize,
) -> Result<Vec<CalibStep>> {
    if total_error_var <= 0.0 {
        return Err(CalError::InvalidArgument(
            "total error variance must be positive".into(),
        ));
    }
    let mut xs: Vec<f64> = (0..6).map(|i| -1.0 + 2.0 * i as f64 / 5.0).collect();
    let mut ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
    let grid: Vec<f64> = (0..401).map(|i| -1.0 + 2.0 * i as f64 / 400.0).collect();
    let spec = GpSpec {
        regressors: Regressors::Constant,
        nugget: 1e-8,
        mode: FitMode::Fixed {
            lengthscales: vec![lengthscale],
        },
    };
    let mut trajectory = Vec::with_capacity(steps);
    for _ in 0..steps {
        let x_mat = DMatrix::from_fn(xs.len(), 1, |i, _| xs[i]);
        let y_vec = DVector::from_fn(ys.len(), |i, _| ys[i]);
        let em = CoefficientEmulator::fit(&x_mat, &y_vec, &spec)?;
        let mut log_post = Vec::with_capacity(grid.len());
        for &t in &grid {
            let theta = DVector::from_column_slice(&[t]);
            let mean = em.predict_mean(&theta);
            let var = em.predict_var(&theta)? + total_error_var;
            let r = z - mean;
            log_post.push(-0.5 * (r * r / var + var.ln()));
        }
        let max_lp = log_post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let post: Vec<f64> = log_post.iter().map(|lp| (lp - max_lp).exp()).collect();
        let total: f64 = post.iter().sum();
        let map_idx = post
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let map = grid[map_idx];

        let mut cum = 0.0;
        let mut lo = grid[0];
        let mut hi = grid[grid.len() - 1];
        let mut lo_set = false;
        for (i, &p) in post.iter().enumerate() {
            cum += p / total;
            if !lo_set && cum >= 0.025 {
                lo = grid[i];
                lo_set = true;
            }
            if cum >= 0.975 {
                hi = grid[i];
                break;
            }
        }
        trajectory.push(CalibStep {
            design: xs.iter().cloned().zip(ys.iter().cloned()).collect(),
            map,
            grid: grid.clone(),
            posterior: post.iter().map(|p| p / total).collect(),
            width95: (hi - lo).max(0.0),
        });
        xs.push(map);
        ys.push(f(map));
    }
    Ok(trajectory)
}
