//! The optimal rotation algorithm: sequential selection of variance-constrained
//! linear combinations that minimize the reconstruction error of the
//! observations, completed by the residual basis and truncated.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::{
    gram_schmidt_w_drop, reconstruction_error, variance_explained_single,
    variance_explained_total, w_norm, Basis,
};
use crate::error::{CalError, Result};
use crate::weight::WeightMatrix;
use crate::wsvd::residual_basis;

/// Simulated annealing settings for the per-vector optimization.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnnealConfig {
    /// Initial temperature; `None` uses the initial objective magnitude.
    pub initial_temperature: Option<f64>,
    pub cooling_rate: f64,
    pub steps_per_temperature: usize,
    /// Stop when the temperature falls below this fraction of the initial one.
    pub min_temperature_ratio: f64,
    /// Scale of Gaussian proposals on the combination vector.
    pub proposal_scale: f64,
    /// Independent restarts; the best objective wins, ties broken by lowest
    /// restart index.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            initial_temperature: None,
            cooling_rate: 0.95,
            steps_per_temperature: 100,
            min_temperature_ratio: 1e-4,
            proposal_scale: 0.2,
            restarts: 2,
            seed: 0,
        }
    }
}

/// Configuration of the optimal rotation algorithm.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RotationConfig {
    /// Per-vector minimum variance fractions; empty entries fall back to half
    /// of the matching initial-basis variance share.
    #[serde(default)]
    pub v: Vec<f64>,
    pub v_tot: f64,
    /// History matching bound, typically a chi-squared quantile.
    pub threshold: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default)]
    pub annealer: AnnealConfig,
}

fn default_max_iterations() -> usize {
    10
}

impl RotationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.v.iter().any(|&x| !(x >= 0.0) || x >= 1.0) {
            return Err(CalError::InvalidArgument(
                "per-vector variance fractions must lie in [0, 1)".into(),
            ));
        }
        if !(self.v_tot > 0.0 && self.v_tot <= 1.0) {
            return Err(CalError::InvalidArgument(
                "v_tot must lie in (0, 1]".into(),
            ));
        }
        if !(self.threshold >= 0.0) {
            return Err(CalError::InvalidArgument("threshold must be >= 0".into()));
        }
        if self.max_iterations == 0 {
            return Err(CalError::InvalidArgument(
                "max_iterations must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome status of a rotation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationStatus {
    Converged,
    TerminalCase,
    InfeasibleV,
    IterationCapExceeded,
}

/// Result of the optimal rotation algorithm.
#[derive(Clone, Debug)]
pub struct RotationResult {
    /// Truncated basis for calibration.
    pub basis: Basis,
    pub q: usize,
    /// The completed basis before truncation.
    pub full_basis: Basis,
    /// Per-vector variance shares of the full basis.
    pub per_vector_variance: Vec<f64>,
    /// `R_W` of the selected vectors after each optimization iteration.
    pub reconstruction_trace: Vec<f64>,
    /// `R_W` of the truncated basis.
    pub truncated_error: f64,
    /// Max deviation of `Lambda^T Lambda` from identity, where `Lambda`
    /// expresses the full basis in terms of the initial one.
    pub rotation_check: Option<f64>,
    pub status: RotationStatus,
    pub n_optimized: usize,
}

/// Verdict of the pre-check on the full basis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TerminalCheck {
    Ok(f64),
    Terminal(f64),
}

/// Step 1 of the algorithm: if the full-rank basis cannot reconstruct the
/// observations within the bound, no rotation can either.
pub fn terminal_case_check(
    b: &Basis,
    w: &WeightMatrix,
    z: &DVector<f64>,
    threshold: f64,
) -> Result<TerminalCheck> {
    let err = reconstruction_error(b, w, z)?;
    if err > threshold {
        Ok(TerminalCheck::Terminal(err))
    } else {
        Ok(TerminalCheck::Ok(err))
    }
}

// Inner products needed by the per-vector search. With a W-orthonormal search
// basis that is W-orthogonal to the already-selected vectors, the objective and
// the variance constraint are quadratic forms in the combination vector.
struct SearchProblem {
    /// Sum over runs of `(lambda^T c_j)^2` is `lambda^T m lambda`.
    m: DMatrix<f64>,
    /// Projection coefficients of the observations on the search basis.
    d: DVector<f64>,
    /// Total ensemble variability (denominator of the variance fractions).
    denom: f64,
}

impl SearchProblem {
    fn build(
        search: &Basis,
        w: &WeightMatrix,
        z: &DVector<f64>,
        centred: &DMatrix<f64>,
    ) -> Result<Self> {
        let winv_b = w.solve_mat(search.vectors())?;
        let c = winv_b.transpose() * centred; // k x n
        let m = &c * c.transpose();
        let d = winv_b.transpose() * z;
        let mut denom = 0.0;
        for j in 0..centred.ncols() {
            denom += w.quad_form(&centred.column(j).into_owned())?;
        }
        if denom <= 0.0 {
            return Err(CalError::DegenerateEnsemble);
        }
        Ok(Self { m, d, denom })
    }

    /// Variance fraction explained by the unit combination `lambda`.
    fn variance(&self, lambda: &DVector<f64>) -> f64 {
        lambda.dot(&(&self.m * lambda)) / self.denom
    }

    /// Squared projection of the observations onto the combination; the
    /// reconstruction error decreases by exactly this amount.
    fn gain(&self, lambda: &DVector<f64>) -> f64 {
        let t = self.d.dot(lambda);
        t * t
    }
}

/// Select the linear combination of `search` minimizing the reconstruction
/// error of `z` subject to explaining at least `v_k` of the ensemble
/// variability. Returns the normalized field-space vector.
///
/// `search` must be W-orthonormal and W-orthogonal to any previously selected
/// vectors (the residual-basis construction guarantees this).
pub fn optimize_vector(
    search: &Basis,
    w: &WeightMatrix,
    z: &DVector<f64>,
    centred: &DMatrix<f64>,
    v_k: f64,
    cfg: &AnnealConfig,
) -> Result<DVector<f64>> {
    let problem = SearchProblem::build(search, w, z, centred)?;
    let k = search.len();

    let eigen = SymmetricEigen::new(problem.m.clone());
    let (mut best_eig, mut best_idx) = (f64::NEG_INFINITY, 0);
    for i in 0..k {
        if eigen.eigenvalues[i] > best_eig {
            best_eig = eigen.eigenvalues[i];
            best_idx = i;
        }
    }
    let attainable = best_eig / problem.denom;
    if attainable < v_k - 1e-12 {
        return Err(CalError::InfeasibleVariance {
            requested: v_k,
            attainable,
        });
    }
    let leading = eigen.eigenvectors.column(best_idx).into_owned();

    // Deterministic warm start: scan the arc between the most-variance
    // direction (always feasible) and the most-gain direction.
    let d_norm = problem.d.norm();
    let mut start = leading.clone();
    let mut start_gain = problem.gain(&start);
    if d_norm > 0.0 {
        let d_hat = &problem.d / d_norm;
        for step in 0..=100 {
            let t = step as f64 / 100.0;
            let cand = &leading * (1.0 - t) + &d_hat * t;
            let n = cand.norm();
            if n < 1e-12 {
                continue;
            }
            let cand = cand / n;
            if problem.variance(&cand) >= v_k && problem.gain(&cand) > start_gain {
                start_gain = problem.gain(&cand);
                start = cand;
            }
        }
    }

    let mut best_lambda = start.clone();
    let mut best_gain = start_gain;
    for restart in 0..cfg.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(restart as u64));
        let (lambda, gain) = anneal(&problem, &start, v_k, cfg, &mut rng);
        if gain > best_gain {
            best_gain = gain;
            best_lambda = lambda;
        }
    }

    let gamma = search.vectors() * &best_lambda;
    let norm = w_norm(&gamma, w)?;
    Ok(gamma / norm.sqrt())
}

fn anneal(
    problem: &SearchProblem,
    start: &DVector<f64>,
    v_k: f64,
    cfg: &AnnealConfig,
    rng: &mut ChaCha8Rng,
) -> (DVector<f64>, f64) {
    let mut current = start.clone();
    let mut current_gain = problem.gain(&current);
    let mut best = current.clone();
    let mut best_gain = current_gain;

    let t0 = cfg
        .initial_temperature
        .unwrap_or_else(|| current_gain.abs().max(1.0));
    let t_min = t0 * cfg.min_temperature_ratio;
    let mut temp = t0;
    let k = current.len();

    while temp > t_min {
        for _ in 0..cfg.steps_per_temperature {
            let mut proposal = current.clone();
            for i in 0..k {
                let step: f64 = StandardNormal.sample(rng);
                proposal[i] += cfg.proposal_scale * step;
            }
            let n = proposal.norm();
            if n < 1e-12 {
                continue;
            }
            proposal /= n;
            // Hard rejection of constraint violations.
            if problem.variance(&proposal) < v_k {
                continue;
            }
            let gain = problem.gain(&proposal);
            let delta = gain - current_gain; // maximize gain
            if delta >= 0.0 || rng.gen::<f64>() < (delta / temp).exp() {
                current = proposal;
                current_gain = gain;
                if gain > best_gain {
                    best_gain = gain;
                    best = current.clone();
                }
            }
        }
        temp *= cfg.cooling_rate;
    }
    (best, best_gain)
}

/// Run the full optimal rotation algorithm starting from a full-rank
/// W-orthonormal basis of the centred ensemble (typically the weighted SVD
/// basis). `z` is the centred observation anomaly.
pub fn optimal_rotation(
    centred: &DMatrix<f64>,
    w: &WeightMatrix,
    z: &DVector<f64>,
    cfg: &RotationConfig,
    initial: &Basis,
) -> Result<RotationResult> {
    rotate_impl(centred, w, z, cfg, initial, None)
}

/// Variant of the algorithm that searches over the concatenation of externally
/// supplied physical patterns and the residual basis at every iteration,
/// re-orthonormalizing via Gram-Schmidt after each selection.
pub fn rotation_with_physical_vectors(
    centred: &DMatrix<f64>,
    w: &WeightMatrix,
    z: &DVector<f64>,
    cfg: &RotationConfig,
    initial: &Basis,
    physical: &Basis,
) -> Result<RotationResult> {
    if physical.is_empty() {
        return optimal_rotation(centred, w, z, cfg, initial);
    }
    rotate_impl(centred, w, z, cfg, initial, Some(physical))
}

fn rotate_impl(
    centred: &DMatrix<f64>,
    w: &WeightMatrix,
    z: &DVector<f64>,
    cfg: &RotationConfig,
    initial: &Basis,
    physical: Option<&Basis>,
) -> Result<RotationResult> {
    cfg.validate()?;

    // Step 1: terminal-case pre-check on the full basis. With external
    // physical vectors, the reachable span includes them.
    let full_span = match physical {
        None => initial.clone(),
        Some(p) => gram_schmidt_w_drop(&p.concat(initial), w)?,
    };
    let full_error = reconstruction_error(&full_span, w, z)?;
    if full_error > cfg.threshold {
        return Ok(RotationResult {
            basis: initial.truncate(0),
            q: 0,
            full_basis: initial.clone(),
            per_vector_variance: vec![],
            reconstruction_trace: vec![full_error],
            truncated_error: full_error,
            rotation_check: None,
            status: RotationStatus::TerminalCase,
            n_optimized: 0,
        });
    }

    // Default per-vector constraints: half the variance share of the matching
    // initial-basis vector.
    let initial_shares: Vec<f64> = (0..initial.len())
        .map(|i| variance_explained_single(&initial.column(i), w, centred))
        .collect::<Result<_>>()?;

    let mut selected: Option<Basis> = None;
    let mut search = match physical {
        None => initial.clone(),
        Some(p) => gram_schmidt_w_drop(&p.concat(initial), w)?,
    };
    let mut trace: Vec<f64> = Vec::new();
    let mut best: Option<(Basis, Basis, usize, f64)> = None; // (truncated, full, q, err)

    for k in 1..=cfg.max_iterations {
        let v_k = cfg
            .v
            .get(k - 1)
            .copied()
            .unwrap_or_else(|| initial_shares.get(k - 1).copied().unwrap_or(0.0) * 0.5);

        let mut anneal_cfg = cfg.annealer.clone();
        anneal_cfg.seed = cfg.annealer.seed.wrapping_add((k as u64) << 32);
        let gamma = match optimize_vector(&search, w, z, centred, v_k, &anneal_cfg) {
            Ok(g) => g,
            Err(CalError::InfeasibleVariance { .. }) => {
                let (basis, full, q, err) = match best {
                    Some(b) => b,
                    None => (initial.truncate(0), initial.clone(), 0, full_error),
                };
                return Ok(RotationResult {
                    basis,
                    q,
                    full_basis: full,
                    per_vector_variance: vec![],
                    reconstruction_trace: trace,
                    truncated_error: err,
                    rotation_check: None,
                    status: RotationStatus::InfeasibleV,
                    n_optimized: k - 1,
                });
            }
            Err(e) => return Err(e),
        };

        let picked = match &selected {
            None => Basis::orthonormal_unchecked(DMatrix::from_columns(&[gamma.column(0)])),
            Some(prev) => {
                let joined = prev.concat(&Basis::new(DMatrix::from_columns(&[gamma.column(0)])));
                // Re-impose orthonormality; a no-op up to rounding for the
                // residual-basis search space.
                gram_schmidt_w_drop(&joined, w)?
            }
        };
        trace.push(reconstruction_error(&picked, w, z)?);

        // Step 3: complete to a full-rank basis with the residual basis.
        let (full, resid_for_search) = match residual_basis(centred, &picked, w) {
            Ok(res) => {
                let completion = match physical {
                    None => res.basis.clone(),
                    Some(p) => {
                        let raw = picked.concat(&p.concat(&res.basis));
                        let ortho = gram_schmidt_w_drop(&raw, w)?;
                        strip_leading(&ortho, picked.len())
                    }
                };
                (picked.concat(&completion), Some(completion))
            }
            Err(CalError::DegenerateEnsemble) => (picked.clone(), None),
            Err(e) => return Err(e),
        };
        let full = Basis::orthonormal_unchecked(full.vectors().clone());

        // Step 4: truncate at the minimal q explaining v_tot.
        let q = minimal_truncation(&full, w, centred, cfg.v_tot)?;
        let truncated = full.truncate(q);
        let truncated_error = reconstruction_error(&truncated, w, z)?;
        best = Some((truncated.clone(), full.clone(), q, truncated_error));

        if truncated_error < cfg.threshold {
            let per_vector: Vec<f64> = (0..full.len())
                .map(|i| variance_explained_single(&full.column(i), w, centred))
                .collect::<Result<_>>()?;
            let rotation_check = Some(rotation_deviation(&full_span, w, &full)?);
            return Ok(RotationResult {
                basis: truncated,
                q,
                full_basis: full,
                per_vector_variance: per_vector,
                reconstruction_trace: trace,
                truncated_error,
                rotation_check,
                status: RotationStatus::Converged,
                n_optimized: k,
            });
        }

        selected = Some(picked);
        search = match resid_for_search {
            Some(r) => r,
            None => break, // nothing left to search
        };
        if search.is_empty() {
            break;
        }
    }

    let (basis, full, q, err) = best.expect("at least one iteration ran");
    let per_vector: Vec<f64> = (0..full.len())
        .map(|i| variance_explained_single(&full.column(i), w, centred))
        .collect::<Result<_>>()?;
    Ok(RotationResult {
        basis,
        q,
        full_basis: full,
        per_vector_variance: per_vector,
        reconstruction_trace: trace,
        truncated_error: err,
        rotation_check: None,
        status: RotationStatus::IterationCapExceeded,
        n_optimized: cfg.max_iterations,
    })
}

fn strip_leading(b: &Basis, n: usize) -> Basis {
    let keep = b.len().saturating_sub(n);
    Basis::orthonormal_unchecked(b.vectors().columns(n, keep).into_owned())
}

fn minimal_truncation(
    full: &Basis,
    w: &WeightMatrix,
    centred: &DMatrix<f64>,
    v_tot: f64,
) -> Result<usize> {
    for q in 1..=full.len() {
        let v = variance_explained_total(&full.truncate(q), w, centred)?;
        if v >= v_tot {
            return Ok(q);
        }
    }
    Ok(full.len())
}

/// Max deviation of `Lambda^T Lambda` from the identity, where
/// `Lambda = initial^T W^{-1} result` expresses the result in terms of the
/// initial W-orthonormal basis.
pub fn rotation_deviation(initial: &Basis, w: &WeightMatrix, result: &Basis) -> Result<f64> {
    let lambda = initial.vectors().transpose() * w.solve_mat(result.vectors())?;
    let ll = lambda.transpose() * &lambda;
    let m = ll.nrows();
    Ok((ll - DMatrix::identity(m, m)).abs().max())
}

/// One row of a VarMSE table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VarmseRow {
    pub k: usize,
    pub var_explained: f64,
    pub recon_error: f64,
    pub threshold: f64,
}

/// Variance-explained and reconstruction-error curves over all truncations of
/// a basis.
pub fn varmse_table(
    basis: &Basis,
    w: &WeightMatrix,
    z: &DVector<f64>,
    centred: &DMatrix<f64>,
    threshold: f64,
) -> Result<Vec<VarmseRow>> {
    let mut rows = Vec::with_capacity(basis.len());
    for k in 1..=basis.len() {
        let b_k = basis.truncate(k);
        rows.push(VarmseRow {
            k,
            var_explained: variance_explained_total(&b_k, w, centred)?,
            recon_error: reconstruction_error(&b_k, w, z)?,
            threshold,
        });
    }
    Ok(rows)
}
