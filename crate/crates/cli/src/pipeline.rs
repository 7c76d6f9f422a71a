//! Command implementations: each one reads a JSON config, validates input
//! dimensions, computes, writes its artifacts plus a run manifest into the
//! output directory and returns a process exit code.
//!
//! Exit codes: 0 success; 2 terminal case (the observations cannot be
//! reached within the stated bound); 3 infeasible variance constraint;
//! 1 generic failure (I/O, parsing, validation).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use calopt_core::basis::Basis;
use calopt_core::calibration::{
    history_match, nroy_design, iterative_calibration_demo, SamplerConfig,
    UncertaintySpec, WaveConstraint, WaveResult,
};
use calopt_core::emulator::{fit_coefficient_emulators, FieldEmulator};
use calopt_core::io::{
    read_matrix_csv, read_vector_csv, read_weight_csv, write_matrix_csv,
    write_vector_csv, write_weight_csv, EmulatorBundle,
};
use calopt_core::rotation::{optimal_rotation, varmse_table, RotationResult, RotationStatus};
use calopt_core::toy::{
    maximin_lhs, toy_ensemble, toy_observe, toy_sigma_e, toy_sigma_eta,
    ToyConfig, ToyPatternSet, FIELD_LEN, N_PATTERNS,
};
use calopt_core::weight::WeightMatrix;
use calopt_core::wsvd::wsvd;
use calopt_core::Ensemble;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{self, BasisConfig, EmulateConfig, HmConfig, TerminalDemoConfig, ToyGenConfig, WaveConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_TERMINAL: u8 = 2;
pub const EXIT_INFEASIBLE: u8 = 3;

/// Common command-line arguments.
pub struct RunArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

/// Provenance record written next to every command's outputs. Timing is the
/// only non-deterministic field and lives in its own sub-object so the data
/// outputs stay byte-identical across reruns.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    tool_version: String,
    config_path: String,
    config_sha256: String,
    seed_override: Option<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    parent: Option<String>,
    timing: Timing,
}

#[derive(Serialize)]
struct Timing {
    wall_ms: u128,
}

/// Exclusive lock on the output directory for the duration of one command.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        let path = dir.join(".calopt.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "output directory {} is locked by another run (stale? remove {})",
                dir.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("creating lock {}", path.display())),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

struct ManifestBuilder {
    command: String,
    args_config: PathBuf,
    seed: Option<u64>,
    out: PathBuf,
    inputs: Vec<String>,
    outputs: Vec<String>,
    parent: Option<String>,
    start: Instant,
}

impl ManifestBuilder {
    fn new(command: &str, args: &RunArgs) -> Self {
        Self {
            command: command.to_string(),
            args_config: args.config.clone(),
            seed: args.seed,
            out: args.out.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            parent: None,
            start: Instant::now(),
        }
    }

    fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    fn out_path(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.display().to_string());
        p
    }

    fn finish(self) -> Result<()> {
        let config_text = fs::read(&self.args_config)
            .with_context(|| format!("hashing config {}", self.args_config.display()))?;
        let hash = Sha256::digest(&config_text);
        let manifest = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_path: self.args_config.display().to_string(),
            config_sha256: format!("{hash:x}"),
            seed_override: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            parent: self.parent,
            timing: Timing {
                wall_ms: self.start.elapsed().as_millis(),
            },
        };
        let path = self.out.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn write_csv_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Column-centre an output matrix, returning the centred matrix and the mean.
fn centre(outputs: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = outputs.ncols();
    let mut mean = DVector::zeros(outputs.nrows());
    for j in 0..n {
        mean += outputs.column(j);
    }
    mean /= n as f64;
    let mut centred = outputs.clone();
    for j in 0..n {
        let mut c = centred.column_mut(j);
        c -= &mean;
    }
    (centred, mean)
}

fn check_dims(label: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        bail!("dimension mismatch: {label}: expected {expected}, got {got}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// toy-gen
// ---------------------------------------------------------------------------

pub fn cmd_toy_gen(args: &RunArgs) -> Result<u8> {
    let mut cfg: ToyGenConfig = config::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.ensemble_seed = seed;
    }
    let _lock = DirLock::acquire(&args.out)?;
    let mut mf = ManifestBuilder::new("toy-gen", args);
    mf.input(&args.config);

    let patterns = ToyPatternSet::new(cfg.pattern_seed);
    let zcfg = ToyConfig {
        noise_sd: cfg.z_noise_sd,
        seed: cfg.z_seed,
        ..Default::default()
    };
    let z = toy_observe(&patterns, &zcfg, cfg.obs_noise)?;
    let design = maximin_lhs(cfg.n_runs, 6, cfg.design_seed, cfg.design_restarts)?;
    let ensemble = toy_ensemble(&patterns, &design, cfg.ensemble_noise_sd, cfg.ensemble_seed)?;
    let sigma_e = toy_sigma_e()?;
    let sigma_eta = toy_sigma_eta()?;
    let weight =
        WeightMatrix::dense_with_jitter(sigma_e.to_dense() + sigma_eta.to_dense(), 1e-8)?;

    let mut pattern_mat = DMatrix::zeros(FIELD_LEN, N_PATTERNS);
    for i in 0..N_PATTERNS {
        pattern_mat.set_column(i, patterns.pattern(i));
    }

    write_matrix_csv(&mf.out_path("design.csv"), &design)?;
    write_matrix_csv(&mf.out_path("ensemble.csv"), ensemble.outputs())?;
    write_vector_csv(&mf.out_path("z.csv"), &z)?;
    write_weight_csv(&mf.out_path("sigma_e.csv"), &sigma_e)?;
    write_weight_csv(&mf.out_path("sigma_eta.csv"), &sigma_eta)?;
    write_weight_csv(&mf.out_path("weight.csv"), &weight)?;
    write_matrix_csv(&mf.out_path("patterns.csv"), &pattern_mat)?;
    mf.finish()?;
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// basis
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct RotationReport {
    status: RotationStatus,
    q: usize,
    n_optimized: usize,
    truncated_error: f64,
    reconstruction_trace: Vec<f64>,
    per_vector_variance: Vec<f64>,
    rotation_check: Option<f64>,
}

fn status_exit(status: RotationStatus) -> u8 {
    match status {
        RotationStatus::TerminalCase => EXIT_TERMINAL,
        RotationStatus::InfeasibleV => EXIT_INFEASIBLE,
        _ => EXIT_OK,
    }
}

pub fn cmd_basis(args: &RunArgs) -> Result<u8> {
    let mut cfg: BasisConfig = config::load(&args.config)?;
    if let Some(seed) = args.seed {
        if let Some(rot) = cfg.rotation.as_mut() {
            rot.annealer.seed = seed;
        }
    }
    let _lock = DirLock::acquire(&args.out)?;
    let mut mf = ManifestBuilder::new("basis", args);
    mf.input(&args.config);
    mf.input(&cfg.ensemble);
    mf.input(&cfg.weight);
    mf.input(&cfg.z);

    let outputs = read_matrix_csv(&cfg.ensemble)?;
    let w = read_weight_csv(&cfg.weight)?;
    let z = read_vector_csv(&cfg.z)?;
    check_dims("weight dim vs field length", outputs.nrows(), w.dim())?;
    check_dims("z length vs field length", outputs.nrows(), z.len())?;

    let (centred, mean) = centre(&outputs);
    let zc = &z - &mean;
    let svd = wsvd(&centred, &w)?;

    let exit = match cfg.mode.as_str() {
        "svd" => {
            let threshold = cfg
                .rotation
                .as_ref()
                .map(|r| r.resolve_threshold())
                .transpose()?
                .unwrap_or(f64::INFINITY);
            write_matrix_csv(&mf.out_path("basis.csv"), svd.basis.vectors())?;
            let table = varmse_table(&svd.basis, &w, &zc, &centred, threshold)?;
            write_varmse(&mf.out_path("varmse.csv"), &table)?;
            EXIT_OK
        }
        "rotate" => {
            let section = cfg
                .rotation
                .as_ref()
                .context("mode \"rotate\" needs a `rotation` section")?;
            let rc = section.to_config()?;
            let rot = optimal_rotation(&centred, &w, &zc, &rc, &svd.basis)?;
            write_matrix_csv(&mf.out_path("basis.csv"), rot.basis.vectors())?;
            write_matrix_csv(&mf.out_path("basis_full.csv"), rot.full_basis.vectors())?;
            if rot.full_basis.len() > 0 {
                let table = varmse_table(&rot.full_basis, &w, &zc, &centred, rc.threshold)?;
                write_varmse(&mf.out_path("varmse.csv"), &table)?;
            }
            write_rotation_report(&mf.out_path("rotation.json"), &rot)?;
            status_exit(rot.status)
        }
        other => bail!("unknown basis mode {other:?} (expected \"svd\" or \"rotate\")"),
    };
    mf.finish()?;
    Ok(exit)
}

fn write_varmse(path: &Path, rows: &[calopt_core::rotation::VarmseRow]) -> Result<()> {
    let mut text = String::from("k,var_explained,recon_error,threshold\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{}\n",
            r.k, r.var_explained, r.recon_error, r.threshold
        ));
    }
    write_csv_text(path, &text)
}

fn write_rotation_report(path: &Path, rot: &RotationResult) -> Result<()> {
    let report = RotationReport {
        status: rot.status,
        q: rot.q,
        n_optimized: rot.n_optimized,
        truncated_error: rot.truncated_error,
        reconstruction_trace: rot.reconstruction_trace.clone(),
        per_vector_variance: rot.per_vector_variance.clone(),
        rotation_check: rot.rotation_check,
    };
    fs::write(path, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", path.display()))
}

// ---------------------------------------------------------------------------
// emulate
// ---------------------------------------------------------------------------

pub fn cmd_emulate(args: &RunArgs) -> Result<u8> {
    let cfg: EmulateConfig = config::load(&args.config)?;
    let _lock = DirLock::acquire(&args.out)?;
    let mut mf = ManifestBuilder::new("emulate", args);
    mf.input(&args.config);
    mf.input(&cfg.design);
    mf.input(&cfg.ensemble);
    mf.input(&cfg.basis);
    mf.input(&cfg.weight);

    let design = read_matrix_csv(&cfg.design)?;
    let outputs = read_matrix_csv(&cfg.ensemble)?;
    let basis = Basis::new(read_matrix_csv(&cfg.basis)?);
    let w = read_weight_csv(&cfg.weight)?;
    check_dims("design runs vs ensemble columns", design.nrows(), outputs.ncols())?;
    check_dims("basis rows vs field length", outputs.nrows(), basis.dim())?;
    check_dims("weight dim vs field length", outputs.nrows(), w.dim())?;

    let ensemble = Ensemble::new(design, outputs)?;
    let em = fit_coefficient_emulators(&ensemble, &basis, &w, &cfg.gp)?;
    EmulatorBundle::from_emulator(&em).save(&mf.out_path("bundle.json"))?;
    mf.finish()?;
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// hm
// ---------------------------------------------------------------------------

/// Wave summary persisted as `wave.json`; the retained samples live in
/// `retained.csv` next to it.
#[derive(Serialize, Deserialize)]
pub struct WaveSummary {
    pub threshold: f64,
    pub nroy_fraction: f64,
    pub standard_error: f64,
    pub sample_count: usize,
    pub seed: u64,
    pub empty_nroy: bool,
    pub parent: Option<String>,
}

/// A parent wave loaded back from disk for chained refocussing.
struct ParentWave {
    emulator: FieldEmulator,
    threshold: f64,
    parent: Option<PathBuf>,
}

fn load_parent(dir: &Path) -> Result<ParentWave> {
    let bundle_path = dir.join("bundle.json");
    let wave_path = dir.join("wave.json");
    let emulator = EmulatorBundle::load(&bundle_path)?.to_emulator()?;
    let text = fs::read_to_string(&wave_path)
        .with_context(|| format!("reading {}", wave_path.display()))?;
    let summary: WaveSummary = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", wave_path.display()))?;
    Ok(ParentWave {
        emulator,
        threshold: summary.threshold,
        parent: summary.parent.map(PathBuf::from),
    })
}

/// Walk the on-disk parent chain from oldest to newest.
fn load_parent_chain(leaf: Option<&Path>) -> Result<Vec<ParentWave>> {
    let mut chain = Vec::new();
    let mut current = leaf.map(Path::to_path_buf);
    while let Some(dir) = current {
        let wave = load_parent(&dir)?;
        current = wave.parent.clone();
        chain.push(wave);
        if chain.len() > 64 {
            bail!("parent chain longer than 64 waves; cycle suspected");
        }
    }
    chain.reverse();
    Ok(chain)
}

fn write_wave_outputs(
    mf: &mut ManifestBuilder,
    wr: &WaveResult,
    parent: Option<&Path>,
) -> Result<()> {
    let summary = WaveSummary {
        threshold: wr.threshold,
        nroy_fraction: wr.nroy_fraction,
        standard_error: wr.standard_error,
        sample_count: wr.sample_count,
        seed: wr.seed,
        empty_nroy: wr.empty_nroy,
        parent: parent.map(|p| p.display().to_string()),
    };
    let path = mf.out_path("wave.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?)
        .with_context(|| format!("writing {}", path.display()))?;

    let mut text = String::new();
    for theta in &wr.retained {
        let fields: Vec<String> = theta.iter().map(|v| format!("{v}")).collect();
        text.push_str(&fields.join(","));
        text.push('\n');
    }
    write_csv_text(&mf.out_path("retained.csv"), &text)?;

    let mut impl_text = String::new();
    for v in &wr.retained_implausibility {
        impl_text.push_str(&format!("{v}\n"));
    }
    write_csv_text(&mf.out_path("implausibility.csv"), &impl_text)?;

    write_density_grid(&mf.out_path("density.csv"), &wr.retained)?;
    Ok(())
}

/// Long-format pairwise 2-D histograms of the retained samples over
/// `[-1,1]^2`, 10 bins per axis.
fn write_density_grid(path: &Path, retained: &[Vec<f64>]) -> Result<()> {
    const BINS: usize = 10;
    let mut text = String::from("param_i,param_j,bin_i,bin_j,fraction\n");
    if !retained.is_empty() {
        let p = retained[0].len();
        let total = retained.len() as f64;
        let bin_of = |x: f64| (((x + 1.0) / 2.0 * BINS as f64) as usize).min(BINS - 1);
        for i in 0..p {
            for j in (i + 1)..p {
                let mut counts = [[0usize; BINS]; BINS];
                for theta in retained {
                    counts[bin_of(theta[i])][bin_of(theta[j])] += 1;
                }
                for (bi, row) in counts.iter().enumerate() {
                    for (bj, &c) in row.iter().enumerate() {
                        text.push_str(&format!(
                            "{},{},{},{},{}\n",
                            i,
                            j,
                            bi,
                            bj,
                            c as f64 / total
                        ));
                    }
                }
            }
        }
    }
    write_csv_text(path, &text)
}

pub fn cmd_hm(args: &RunArgs) -> Result<u8> {
    let mut cfg: HmConfig = config::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.sampler.seed = seed;
    }
    let _lock = DirLock::acquire(&args.out)?;
    let mut mf = ManifestBuilder::new("hm", args);
    mf.input(&args.config);
    mf.input(&cfg.bundle);
    mf.input(&cfg.z);
    mf.input(&cfg.sigma_e);
    mf.input(&cfg.sigma_eta);

    let em = EmulatorBundle::load(&cfg.bundle)?.to_emulator()?;
    let z = read_vector_csv(&cfg.z)?;
    let sigma_e = read_weight_csv(&cfg.sigma_e)?;
    let sigma_eta = read_weight_csv(&cfg.sigma_eta)?;
    check_dims("z length vs emulator field length", em.field_len(), z.len())?;
    check_dims("sigma_e dim vs field length", em.field_len(), sigma_e.dim())?;
    check_dims("sigma_eta dim vs field length", em.field_len(), sigma_eta.dim())?;
    let u = UncertaintySpec::new(sigma_e, sigma_eta)?;
    let threshold = cfg.resolve_threshold()?;

    let parents: Vec<ParentWave> = cfg
        .parents
        .iter()
        .map(|dir| load_parent(dir))
        .collect::<Result<_>>()?;
    let constraints: Vec<WaveConstraint> = parents
        .iter()
        .map(|p| WaveConstraint {
            emulator: &p.emulator,
            uncertainty: &u,
            z: &z,
            threshold: p.threshold,
        })
        .collect();

    let sampler = SamplerConfig {
        n_samples: cfg.sampler.n_samples,
        seed: cfg.sampler.seed,
    };
    let wr = history_match(&em, &z, &u, threshold, &sampler, &constraints)?;
    let parent = cfg.parents.last().map(PathBuf::as_path);
    write_wave_outputs(&mut mf, &wr, parent)?;
    mf.parent = parent.map(|p| p.display().to_string());
    mf.finish()?;
    Ok(if wr.empty_nroy { EXIT_TERMINAL } else { EXIT_OK })
}

// ---------------------------------------------------------------------------
// wave (design -> simulate -> basis -> emulate -> hm)
// ---------------------------------------------------------------------------

pub fn cmd_wave(args: &RunArgs) -> Result<u8> {
    let mut cfg: WaveConfig = config::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.sampler.seed = seed;
    }
    let _lock = DirLock::acquire(&args.out)?;
    let mut mf = ManifestBuilder::new("wave", args);
    mf.input(&args.config);
    mf.input(&cfg.z);
    mf.input(&cfg.sigma_e);
    mf.input(&cfg.sigma_eta);

    let z = read_vector_csv(&cfg.z)?;
    let sigma_e = read_weight_csv(&cfg.sigma_e)?;
    let sigma_eta = read_weight_csv(&cfg.sigma_eta)?;
    check_dims("sigma_e dim vs z length", z.len(), sigma_e.dim())?;
    check_dims("sigma_eta dim vs z length", z.len(), sigma_eta.dim())?;
    let w =
        WeightMatrix::dense_with_jitter(sigma_e.to_dense() + sigma_eta.to_dense(), 1e-8)?;
    let u = UncertaintySpec::new(sigma_e, sigma_eta)?;
    let rc = cfg.rotation.to_config()?;

    // Design: explicit file > parent NROY subset > fresh Latin hypercube.
    let design = if let Some(path) = &cfg.design {
        mf.input(path);
        read_matrix_csv(path)?
    } else if let Some(parent_dir) = &cfg.parent {
        let retained_path = parent_dir.join("retained.csv");
        mf.input(&retained_path);
        let retained_mat = read_matrix_csv(&retained_path)?;
        let retained: Vec<Vec<f64>> = (0..retained_mat.nrows())
            .map(|i| retained_mat.row(i).iter().cloned().collect())
            .collect();
        nroy_design(&retained, cfg.n_runs, cfg.design_seed)?
    } else {
        maximin_lhs(cfg.n_runs, 6, cfg.design_seed, cfg.design_restarts)?
    };

    let patterns = ToyPatternSet::new(cfg.toy.pattern_seed);
    let ensemble = toy_ensemble(&patterns, &design, cfg.toy.noise_sd, cfg.toy.ensemble_seed)?;
    write_matrix_csv(&mf.out_path("design.csv"), ensemble.design())?;
    write_matrix_csv(&mf.out_path("ensemble.csv"), ensemble.outputs())?;

    let svd = wsvd(ensemble.centred(), &w)?;
    let zc = &z - ensemble.mean();
    let rot = optimal_rotation(ensemble.centred(), &w, &zc, &rc, &svd.basis)?;
    write_rotation_report(&mf.out_path("rotation.json"), &rot)?;
    if rot.full_basis.len() > 0 {
        let table = varmse_table(&rot.full_basis, &w, &zc, ensemble.centred(), rc.threshold)?;
        write_varmse(&mf.out_path("varmse.csv"), &table)?;
    }
    if rot.status != RotationStatus::Converged {
        mf.finish()?;
        return Ok(status_exit(rot.status));
    }
    write_matrix_csv(&mf.out_path("basis.csv"), rot.basis.vectors())?;

    let em = fit_coefficient_emulators(&ensemble, &rot.basis, &w, &cfg.gp)?;
    EmulatorBundle::from_emulator(&em).save(&mf.out_path("bundle.json"))?;

    let parents = load_parent_chain(cfg.parent.as_deref())?;
    let constraints: Vec<WaveConstraint> = parents
        .iter()
        .map(|p| WaveConstraint {
            emulator: &p.emulator,
            uncertainty: &u,
            z: &z,
            threshold: p.threshold,
        })
        .collect();
    let sampler = SamplerConfig {
        n_samples: cfg.sampler.n_samples,
        seed: cfg.sampler.seed,
    };
    let wr = history_match(&em, &z, &u, rc.threshold, &sampler, &constraints)?;
    write_wave_outputs(&mut mf, &wr, cfg.parent.as_deref())?;
    mf.parent = cfg.parent.as_ref().map(|p| p.display().to_string());
    mf.finish()?;
    Ok(if wr.empty_nroy { EXIT_TERMINAL } else { EXIT_OK })
}

// ---------------------------------------------------------------------------
// terminal-demo
// ---------------------------------------------------------------------------

pub fn cmd_terminal_demo(args: &RunArgs) -> Result<u8> {
    let cfg: TerminalDemoConfig = config::load(&args.config)?;
    let _lock = DirLock::acquire(&args.out)?;
    let mut mf = ManifestBuilder::new("terminal-demo", args);
    mf.input(&args.config);

    let f = |x: f64| (3.0 * x).sin() + x;
    let z = f(cfg.theta_true) + cfg.z_offset;
    let trajectory =
        iterative_calibration_demo(&f, z, cfg.total_error_var, cfg.lengthscale, cfg.steps)?;

    let mut text = String::from("step,map,width95,jump\n");
    let mut prev: Option<f64> = None;
    for (i, step) in trajectory.iter().enumerate() {
        let jump = prev.map(|p| (step.map - p).abs()).unwrap_or(0.0);
        text.push_str(&format!("{},{},{},{}\n", i + 1, step.map, step.width95, jump));
        prev = Some(step.map);
    }
    write_csv_text(&mf.out_path("trajectory.csv"), &text)?;

    if let Some(last) = trajectory.last() {
        let mut d = String::from("x,y\n");
        for (x, y) in &last.design {
            d.push_str(&format!("{x},{y}\n"));
        }
        write_csv_text(&mf.out_path("design.csv"), &d)?;
    }
    mf.finish()?;
    Ok(EXIT_OK)
}
