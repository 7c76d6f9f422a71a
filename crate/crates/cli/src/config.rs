//! JSON configuration schemas for the CLI commands.
//!
//! Every command takes `--config <path.json> --out <dir>` and an optional
//! `--seed` override for its primary random seed. Unknown keys are rejected
//! so typos fail loudly.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use calopt_core::calibration::chi2_threshold;
use calopt_core::emulator::GpSpec;
use calopt_core::rotation::{AnnealConfig, RotationConfig};
use serde::Deserialize;

/// Read and deserialize a JSON config file.
pub fn load<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))
}

fn d_u64<const N: u64>() -> u64 {
    N
}
fn d_usize<const N: usize>() -> usize {
    N
}
fn d_true() -> bool {
    true
}
fn d_noise() -> f64 {
    0.05
}
fn d_vtot() -> f64 {
    0.95
}
fn d_level() -> f64 {
    0.995
}
fn d_lengthscale() -> f64 {
    0.4
}
fn d_theta_true() -> f64 {
    0.4
}
fn d_error_var() -> f64 {
    0.05
}

/// Threshold given either explicitly or as a chi-squared quantile.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSection {
    pub threshold: Option<f64>,
    pub dof: Option<usize>,
    #[serde(default = "d_level")]
    pub level: f64,
}

impl ThresholdSection {
    pub fn resolve(&self) -> Result<f64> {
        match (self.threshold, self.dof) {
            (Some(t), _) => Ok(t),
            (None, Some(dof)) => Ok(chi2_threshold(dof, self.level)?),
            (None, None) => bail!("config needs either `threshold` or `dof` (+ optional `level`)"),
        }
    }
}

/// Rotation settings: the algorithm config plus threshold resolution.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotationSection {
    #[serde(default)]
    pub v: Vec<f64>,
    #[serde(default = "d_vtot")]
    pub v_tot: f64,
    pub threshold: Option<f64>,
    pub dof: Option<usize>,
    #[serde(default = "d_level")]
    pub level: f64,
    #[serde(default = "d_usize::<10>")]
    pub max_iterations: usize,
    #[serde(default)]
    pub annealer: AnnealConfig,
}

impl RotationSection {
    pub fn resolve_threshold(&self) -> Result<f64> {
        ThresholdSection {
            threshold: self.threshold,
            dof: self.dof,
            level: self.level,
        }
        .resolve()
    }

    pub fn to_config(&self) -> Result<RotationConfig> {
        let cfg = RotationConfig {
            v: self.v.clone(),
            v_tot: self.v_tot,
            threshold: self.resolve_threshold()?,
            max_iterations: self.max_iterations,
            annealer: self.annealer.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `toy-gen`: generate the idealised-model artifacts.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyGenConfig {
    #[serde(default = "d_u64::<42>")]
    pub pattern_seed: u64,
    /// Seed of the observation draw (function call + observation error).
    #[serde(default = "d_u64::<331>")]
    pub z_seed: u64,
    /// Function-noise standard deviation used when generating `z`.
    #[serde(default)]
    pub z_noise_sd: f64,
    /// Add an observation-error draw to `z`.
    #[serde(default = "d_true")]
    pub obs_noise: bool,
    #[serde(default = "d_usize::<60>")]
    pub n_runs: usize,
    #[serde(default = "d_u64::<1>")]
    pub design_seed: u64,
    #[serde(default = "d_usize::<100>")]
    pub design_restarts: usize,
    /// Function-noise standard deviation for ensemble runs.
    #[serde(default = "d_noise")]
    pub ensemble_noise_sd: f64,
    /// Primary seed; overridden by `--seed`.
    #[serde(default = "d_u64::<101>")]
    pub ensemble_seed: u64,
}

/// `basis`: SVD or rotated basis from an ensemble.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    /// Output matrix CSV, one column per run.
    pub ensemble: PathBuf,
    /// Weight matrix CSV (square dense or one-row diagonal).
    pub weight: PathBuf,
    /// Observed field CSV.
    pub z: PathBuf,
    /// "svd" or "rotate".
    pub mode: String,
    pub rotation: Option<RotationSection>,
}

/// `emulate`: fit per-coefficient GPs over a basis.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmulateConfig {
    /// Design CSV, one row per run.
    pub design: PathBuf,
    pub ensemble: PathBuf,
    pub basis: PathBuf,
    pub weight: PathBuf,
    #[serde(default)]
    pub gp: GpSpec,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    #[serde(default = "d_usize::<100_000>")]
    pub n_samples: usize,
    /// Primary seed; overridden by `--seed`.
    #[serde(default)]
    pub seed: u64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            n_samples: 100_000,
            seed: 0,
        }
    }
}

/// `hm`: one history-matching wave from a saved emulator bundle.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmConfig {
    pub bundle: PathBuf,
    pub z: PathBuf,
    pub sigma_e: PathBuf,
    pub sigma_eta: PathBuf,
    pub threshold: Option<f64>,
    pub dof: Option<usize>,
    #[serde(default = "d_level")]
    pub level: f64,
    #[serde(default)]
    pub sampler: SamplerSection,
    /// Previous wave directories, oldest first.
    #[serde(default)]
    pub parents: Vec<PathBuf>,
}

impl HmConfig {
    pub fn resolve_threshold(&self) -> Result<f64> {
        ThresholdSection {
            threshold: self.threshold,
            dof: self.dof,
            level: self.level,
        }
        .resolve()
    }
}

/// Simulator settings for the all-in-one `wave` command.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySimSection {
    #[serde(default = "d_u64::<42>")]
    pub pattern_seed: u64,
    #[serde(default = "d_noise")]
    pub noise_sd: f64,
    #[serde(default = "d_u64::<101>")]
    pub ensemble_seed: u64,
}

/// `wave`: design -> run simulator -> basis -> emulate -> history match.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveConfig {
    pub z: PathBuf,
    pub sigma_e: PathBuf,
    pub sigma_eta: PathBuf,
    pub toy: ToySimSection,
    /// Explicit design CSV; otherwise a maximin Latin hypercube (first wave)
    /// or a maximin subset of the parent's retained samples.
    pub design: Option<PathBuf>,
    #[serde(default = "d_usize::<60>")]
    pub n_runs: usize,
    #[serde(default = "d_u64::<900>")]
    pub design_seed: u64,
    #[serde(default = "d_usize::<100>")]
    pub design_restarts: usize,
    pub rotation: RotationSection,
    #[serde(default)]
    pub gp: GpSpec,
    #[serde(default)]
    pub sampler: SamplerSection,
    /// Immediate parent wave directory.
    pub parent: Option<PathBuf>,
}

/// `terminal-demo`: 1-D iterative calibration trajectory.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalDemoConfig {
    /// Best input of the underlying function.
    #[serde(default = "d_theta_true")]
    pub theta_true: f64,
    /// Offset added to the observation; a large offset makes the stated
    /// uncertainty misspecified and destabilizes the calibration.
    #[serde(default)]
    pub z_offset: f64,
    #[serde(default = "d_error_var")]
    pub total_error_var: f64,
    #[serde(default = "d_lengthscale")]
    pub lengthscale: f64,
    #[serde(default = "d_usize::<10>")]
    pub steps: usize,
}
