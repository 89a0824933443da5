use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_capspread"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(stage: &str, cfg: &Path, out: &Path, extra: &[&str]) -> i32 {
    let status = bin()
        .arg(stage)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap();
    status.status.code().unwrap()
}

fn report(out: &Path, file: &str) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(out.join(file)).unwrap()).unwrap()
}

/// Writes a variant of the constant reference config with `edit` applied.
fn variant(dir: &Path, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(config("reference_constant.json")).unwrap()).unwrap();
    edit(&mut v);
    let p = dir.join("cfg.json");
    std::fs::write(&p, serde_json::to_string(&v).unwrap()).unwrap();
    p
}

#[test]
fn full_constant_reference_passes() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(run("full", &config("reference_constant.json"), out.path(), &[]), 0);
    let run_report = report(out.path(), "run.json");
    assert_eq!(run_report["report"]["verdict"], "pass");
    assert_eq!(run_report["report"]["stages"].as_array().unwrap().len(), 5);
    let signal = report(out.path(), "signal.json");
    assert!((signal["report"]["ell0"].as_f64().unwrap() - 100.0).abs() < 1e-9);
}

#[test]
fn falsified_signal_fails_equality() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(run("verify-foc", &config("falsify_scale2.json"), out.path(), &[]), 1);
    let foc = report(out.path(), "foc.json");
    assert_eq!(foc["report"]["equality"]["verdict"], "fail");
    assert_eq!(foc["report"]["signal_scale"], 2.0);
}

#[test]
fn simulate_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = config("reference_gbm.json");
    assert_eq!(run("simulate", &cfg, a.path(), &["--seed", "17"]), 0);
    assert_eq!(run("simulate", &cfg, b.path(), &["--seed", "17", "--workers", "2"]), 0);
    for f in ["scenarios.csv", "simulate.json", "run.json"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    assert_eq!(run("simulate", &cfg, c.path(), &["--seed", "18"]), 0);
    assert_ne!(std::fs::read(a.path().join("scenarios.csv")).unwrap(), std::fs::read(c.path().join("scenarios.csv")).unwrap());
}

#[test]
fn every_artifact_carries_the_hash() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(run("full", &config("reference_constant.json"), out.path(), &[]), 0);
    let hash = report(out.path(), "run.json")["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    for e in std::fs::read_dir(out.path()).unwrap() {
        let p = e.unwrap().path();
        let text = std::fs::read_to_string(&p).unwrap();
        if p.extension().unwrap() == "csv" {
            assert!(text.starts_with(&format!("# config_hash={hash}, version=")), "{}", p.display());
        } else {
            let v: serde_json::Value = serde_json::from_str(&text).unwrap();
            assert_eq!(v["config_hash"], hash.as_str());
            assert!(v["version"].is_string());
        }
    }
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = variant(dir.path(), |v| v["grid"]["nodes"] = 3.into());
    assert_eq!(run("simulate", &bad, dir.path(), &[]), 2);
    let missing = dir.path().join("absent.json");
    assert_eq!(run("simulate", &missing, dir.path(), &[]), 2);
    let alpha = variant(dir.path(), |v| v["problem"]["alpha"] = 1.5.into());
    assert_eq!(run("simulate", &alpha, dir.path(), &[]), 2);
}

#[test]
fn unsupported_cases_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    // y above the base capacity ℓ0 = 100.
    let over = variant(dir.path(), |v| v["problem"]["y"] = serde_json::json!({"shape": "constant", "value": 150.0}));
    assert_eq!(run("build-policy", &over, dir.path(), &[]), 3);
    // Two stochastic factors on the lattice.
    let two = variant(dir.path(), |v| {
        v["drivers"] = serde_json::json!({
            "kind": "gbm", "z0": 1.0, "phi0": 1.0, "theta": 0.01, "sigma_z": 0.2,
            "sigma_phi": 0.1, "rho": 0.3, "r": 0.15
        });
        v["solver"]["method"] = "grid".into();
    });
    assert_eq!(run("solve-signal", &two, dir.path(), &[]), 3);
    // Heat flow does not generate a group.
    let heat = variant(dir.path(), |v| v["operator"] = serde_json::json!({"variant": "heat-circle"}));
    assert_eq!(run("build-policy", &heat, dir.path(), &[]), 3);
}
