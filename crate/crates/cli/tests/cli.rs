//! End-to-end tests of the `calopt` binary: exit codes, determinism,
//! diagnostics and wave chaining.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn calopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calopt"))
        .args(args)
        .output()
        .expect("failed to spawn calopt")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

/// Deterministic pseudo-random stream for fixture data.
struct XorShift(u64);

impl XorShift {
    fn next_f64(&mut self) -> f64 {
        self.0 ^= self.0 << 13;
        self.0 ^= self.0 >> 7;
        self.0 ^= self.0 << 17;
        (self.0 >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }
}

fn csv(rows: &[Vec<f64>]) -> String {
    rows.iter()
        .map(|r| {
            r.iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

/// An 8x5 output ensemble, its design, and an observation inside the span of
/// the centred ensemble (so the full basis reconstructs it exactly).
fn synthetic_fixture(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let mut rng = XorShift(0x9e3779b97f4a7c15);
    let l = 8;
    let n = 5;
    let outputs: Vec<Vec<f64>> = (0..l)
        .map(|_| (0..n).map(|_| rng.next_f64()).collect())
        .collect();
    let mean: Vec<f64> = (0..l)
        .map(|i| outputs[i].iter().sum::<f64>() / n as f64)
        .collect();
    // z = mean + weighted centred columns: inside the span, with generic
    // components on every singular direction.
    let weights = [0.6, -0.4, 0.3, 0.5, -0.2];
    let z: Vec<Vec<f64>> = (0..l)
        .map(|i| {
            let v: f64 = mean[i]
                + (0..n)
                    .map(|j| weights[j] * (outputs[i][j] - mean[i]))
                    .sum::<f64>();
            vec![v]
        })
        .collect();
    let ensemble = dir.join("ensemble.csv");
    let weight = dir.join("weight.csv");
    let z_path = dir.join("z.csv");
    write(&ensemble, &csv(&outputs));
    write(&weight, &csv(&[vec![1.0; l]])); // diagonal identity, one-row form
    write(&z_path, &csv(&z));
    (ensemble, weight, z_path)
}

fn rotate_config(
    ensemble: &Path,
    weight: &Path,
    z: &Path,
    v: &str,
    v_tot: f64,
    threshold: f64,
) -> String {
    format!(
        r#"{{"ensemble": {ens:?}, "weight": {w:?}, "z": {z:?}, "mode": "rotate",
            "rotation": {{"v": {v}, "v_tot": {v_tot}, "threshold": {threshold}}}}}"#,
        ens = ensemble.display().to_string(),
        w = weight.display().to_string(),
        z = z.display().to_string(),
    )
}

#[test]
fn svd_and_huge_threshold_never_exit_terminal() {
    let dir = tempfile::tempdir().unwrap();
    let (ens, w, z) = synthetic_fixture(dir.path());
    let cfg = dir.path().join("svd.json");
    write(
        &cfg,
        &format!(
            r#"{{"ensemble": {:?}, "weight": {:?}, "z": {:?}, "mode": "svd"}}"#,
            ens.display().to_string(),
            w.display().to_string(),
            z.display().to_string()
        ),
    );
    let out = calopt(&[
        "basis",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("svd").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let cfg2 = dir.path().join("rot.json");
    write(&cfg2, &rotate_config(&ens, &w, &z, "[]", 0.95, 1e300));
    let out = calopt(&[
        "basis",
        "--config",
        cfg2.to_str().unwrap(),
        "--out",
        dir.path().join("rot").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let varmse = fs::read_to_string(dir.path().join("rot/varmse.csv")).unwrap();
    assert!(varmse.starts_with("k,var_explained,recon_error,threshold\n"));
}

#[test]
fn unreachable_observation_exits_terminal() {
    let dir = tempfile::tempdir().unwrap();
    let (ens, w, _) = synthetic_fixture(dir.path());
    // observation far outside the ensemble span
    let z = dir.path().join("z_out.csv");
    write(&z, &csv(&(0..8).map(|i| vec![10.0 + i as f64]).collect::<Vec<_>>()));
    let cfg = dir.path().join("rot.json");
    write(&cfg, &rotate_config(&ens, &w, &z, "[]", 0.95, 1e-6));
    let out = calopt(&[
        "basis",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("rot").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(dir.path().join("rot/rotation.json")).unwrap();
    assert!(report.contains("terminal_case"));
}

#[test]
fn impossible_variance_constraint_exits_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let (ens, w, z) = synthetic_fixture(dir.path());
    // z is reconstructible by the full basis, so step 1 passes; a 95%
    // single-vector variance demand exceeds the top singular share.
    let cfg = dir.path().join("rot.json");
    write(&cfg, &rotate_config(&ens, &w, &z, "[0.95]", 0.7, 1e-6));
    let out = calopt(&[
        "basis",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("rot").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn malformed_csv_reports_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let (ens, w, z) = synthetic_fixture(dir.path());
    fs::write(&ens, "1,2,3\n4,5\n").unwrap();
    let cfg = dir.path().join("rot.json");
    write(&cfg, &rotate_config(&ens, &w, &z, "[]", 0.95, 1e300));
    let out = calopt(&[
        "basis",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("rot").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("ensemble.csv:2"),
        "diagnostic should name file and line: {err}"
    );
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (ens, w, z) = synthetic_fixture(dir.path());
    let cfg = dir.path().join("rot.json");
    write(&cfg, &rotate_config(&ens, &w, &z, "[]", 0.95, 1e300));
    let out_dir = dir.path().join("rot");
    fs::create_dir_all(&out_dir).unwrap();
    fs::write(out_dir.join(".calopt.lock"), "").unwrap();
    let out = calopt(&[
        "basis",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

fn toy_gen(dir: &Path, out: &str) -> PathBuf {
    let cfg = dir.join("toygen.json");
    write(&cfg, r#"{"n_runs": 30}"#);
    let out_dir = dir.join(out);
    let res = calopt(&[
        "toy-gen",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    out_dir
}

#[test]
fn toy_gen_outputs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = toy_gen(dir.path(), "a");
    let b = toy_gen(dir.path(), "b");
    for name in [
        "design.csv",
        "ensemble.csv",
        "z.csv",
        "sigma_e.csv",
        "sigma_eta.csv",
        "weight.csv",
        "patterns.csv",
    ] {
        let fa = fs::read(a.join(name)).unwrap();
        let fb = fs::read(b.join(name)).unwrap();
        assert_eq!(fa, fb, "{name} differs between identical runs");
    }
}

fn wave_config(toy_dir: &Path, ls: f64, ensemble_seed: u64, parent: Option<&Path>) -> String {
    let parent_field = parent
        .map(|p| format!(r#", "parent": {:?}"#, p.display().to_string()))
        .unwrap_or_default();
    format!(
        r#"{{"z": {z:?}, "sigma_e": {se:?}, "sigma_eta": {sn:?},
            "toy": {{"pattern_seed": 42, "noise_sd": 0.05, "ensemble_seed": {ensemble_seed}}},
            "n_runs": 30, "design_seed": 1,
            "rotation": {{"v": [0.4, 0.1, 0.1], "v_tot": 0.95, "dof": 100, "level": 0.995}},
            "gp": {{"regressors": "linear", "nugget": 0.01,
                   "mode": {{"fixed": {{"lengthscales": [{ls},{ls},{ls},{ls},{ls},{ls}]}}}}}},
            "sampler": {{"n_samples": 4000, "seed": 77}}{parent_field}}}"#,
        z = toy_dir.join("z.csv").display().to_string(),
        se = toy_dir.join("sigma_e.csv").display().to_string(),
        sn = toy_dir.join("sigma_eta.csv").display().to_string(),
    )
}

fn run_wave(dir: &Path, cfg_text: &str, name: &str) -> PathBuf {
    let cfg = dir.join(format!("{name}.json"));
    write(&cfg, cfg_text);
    let out_dir = dir.join(name);
    let res = calopt(&[
        "wave",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    out_dir
}

#[test]
fn chained_waves_shrink_and_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let toy = toy_gen(dir.path(), "toy");

    let w1 = run_wave(dir.path(), &wave_config(&toy, 0.8, 101, None), "w1");
    let w1b = run_wave(dir.path(), &wave_config(&toy, 0.8, 101, None), "w1b");
    for name in ["wave.json", "retained.csv", "implausibility.csv", "density.csv", "basis.csv"] {
        assert_eq!(
            fs::read(w1.join(name)).unwrap(),
            fs::read(w1b.join(name)).unwrap(),
            "{name} differs between identical wave runs"
        );
    }

    let w2 = run_wave(
        dir.path(),
        &wave_config(&toy, 0.65, 102, Some(&w1)),
        "w2",
    );
    let frac = |p: &Path| -> f64 {
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(p.join("wave.json")).unwrap()).unwrap();
        v["nroy_fraction"].as_f64().unwrap()
    };
    // same sampler seed: the child filters the identical sample stream
    // through the parent first, so its NROY set is a subset of the parent's
    assert!(
        frac(&w2) <= frac(&w1),
        "chained wave must not grow the NROY fraction"
    );
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(w2.join("wave.json")).unwrap()).unwrap();
    assert_eq!(v["parent"].as_str().unwrap(), w1.to_str().unwrap());
}

#[test]
fn emulate_hm_split_matches_all_in_one_wave() {
    let dir = tempfile::tempdir().unwrap();
    let toy = toy_gen(dir.path(), "toy");
    let wave = run_wave(dir.path(), &wave_config(&toy, 0.8, 101, None), "wave");

    // refit from the wave's own artifacts through the split commands
    let emu_cfg = dir.path().join("emulate.json");
    write(
        &emu_cfg,
        &format!(
            r#"{{"design": {d:?}, "ensemble": {e:?}, "basis": {b:?}, "weight": {w:?},
                "gp": {{"regressors": "linear", "nugget": 0.01,
                       "mode": {{"fixed": {{"lengthscales": [0.8,0.8,0.8,0.8,0.8,0.8]}}}}}}}}"#,
            d = wave.join("design.csv").display().to_string(),
            e = wave.join("ensemble.csv").display().to_string(),
            b = wave.join("basis.csv").display().to_string(),
            w = toy.join("weight.csv").display().to_string(),
        ),
    );
    let emu_dir = dir.path().join("emu");
    let res = calopt(&[
        "emulate",
        "--config",
        emu_cfg.to_str().unwrap(),
        "--out",
        emu_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));

    let hm_cfg = dir.path().join("hm.json");
    write(
        &hm_cfg,
        &format!(
            r#"{{"bundle": {b:?}, "z": {z:?}, "sigma_e": {se:?}, "sigma_eta": {sn:?},
                "dof": 100, "level": 0.995,
                "sampler": {{"n_samples": 4000, "seed": 77}}}}"#,
            b = emu_dir.join("bundle.json").display().to_string(),
            z = toy.join("z.csv").display().to_string(),
            se = toy.join("sigma_e.csv").display().to_string(),
            sn = toy.join("sigma_eta.csv").display().to_string(),
        ),
    );
    let hm_dir = dir.path().join("hm");
    let res = calopt(&[
        "hm",
        "--config",
        hm_cfg.to_str().unwrap(),
        "--out",
        hm_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(
        fs::read(wave.join("retained.csv")).unwrap(),
        fs::read(hm_dir.join("retained.csv")).unwrap(),
        "split pipeline must reproduce the all-in-one wave exactly"
    );
}

#[test]
fn hm_with_unreachable_threshold_exits_terminal() {
    let dir = tempfile::tempdir().unwrap();
    let toy = toy_gen(dir.path(), "toy");
    let wave = run_wave(dir.path(), &wave_config(&toy, 0.8, 101, None), "wave");
    let hm_cfg = dir.path().join("hm.json");
    write(
        &hm_cfg,
        &format!(
            r#"{{"bundle": {b:?}, "z": {z:?}, "sigma_e": {se:?}, "sigma_eta": {sn:?},
                "threshold": 1e-4, "sampler": {{"n_samples": 500, "seed": 3}}}}"#,
            b = wave.join("bundle.json").display().to_string(),
            z = toy.join("z.csv").display().to_string(),
            se = toy.join("sigma_e.csv").display().to_string(),
            sn = toy.join("sigma_eta.csv").display().to_string(),
        ),
    );
    let res = calopt(&[
        "hm",
        "--config",
        hm_cfg.to_str().unwrap(),
        "--out",
        dir.path().join("hm").to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 2, "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn terminal_demo_writes_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("demo.json");
    write(&cfg, r#"{"z_offset": 0.8, "total_error_var": 0.01, "steps": 6}"#);
    let out_dir = dir.path().join("demo");
    let res = calopt(&[
        "terminal-demo",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let text = fs::read_to_string(out_dir.join("trajectory.csv")).unwrap();
    assert!(text.starts_with("step,map,width95,jump\n"));
    assert_eq!(text.lines().count(), 7);
}
