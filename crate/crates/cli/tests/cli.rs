use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn marginlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_marginlab"))
        .args(args)
        .env_remove("MARGINLAB_WORKERS")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const RUN: &str = r#"{
    "dataset": {"kind": "generated", "n": 12, "d": 3, "target_margin": 0.25},
    "loss": {"kind": "exp"},
    "policy": {"kind": "aggressive_risk", "c": 1.0},
    "steps": 500,
    "record_every": 25,
    "seed": 5
}"#;

#[test]
fn run_writes_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", RUN);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = marginlab(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["trajectory.csv", "reports.json", "certificate.json", "dataset.csv", "run.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(a.join("plotdata").read_dir().unwrap().count() > 5);

    let o = marginlab(&["check", "--out", a.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("match the recorded"));
}

#[test]
fn seed_flag_changes_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", RUN);
    let out = dir.path().join("x");
    let out = out.to_str().unwrap();
    assert!(marginlab(&["gen-data", "--config", &cfg, "--out", out]).status.success());
    let first = fs::read(dir.path().join("x/dataset.csv")).unwrap();
    assert!(marginlab(&["gen-data", "--config", &cfg, "--out", out, "--seed", "6"]).status.success());
    assert_ne!(first, fs::read(dir.path().join("x/dataset.csv")).unwrap());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    let big = RUN.replace(r#"{"kind": "aggressive_risk", "c": 1.0}"#, r#"{"kind": "constant_hat_eta", "c": 2.0}"#);
    let cfg = write_config(dir.path(), "big.json", &big);
    let o = marginlab(&["run", "--config", &cfg, "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("[config]") && err.contains("1/beta"), "{err}");

    let cfg = write_config(dir.path(), "typo.json", &RUN.replace("\"steps\"", "\"step\""));
    assert_eq!(marginlab(&["run", "--config", &cfg, "--out", out]).status.code(), Some(2));

    let cfg = write_config(dir.path(), "nofile.json", &RUN.replace(
        r#"{"kind": "generated", "n": 12, "d": 3, "target_margin": 0.25}"#,
        r#"{"kind": "path", "path": "missing.csv"}"#,
    ));
    assert_eq!(marginlab(&["run", "--config", &cfg, "--out", out]).status.code(), Some(2));
    assert_eq!(marginlab(&["run", "--config", "/nonexistent.json", "--out", out]).status.code(), Some(2));
    assert!(!Path::new(out).exists());
}

#[test]
fn numeric_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let body = RUN.replace(r#"{"kind": "aggressive_risk", "c": 1.0}"#, r#"{"kind": "constant_eta", "eta": 1e300}"#);
    let cfg = write_config(dir.path(), "huge.json", &body);
    let o = marginlab(&["run", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("[descent]"));
}

#[test]
fn verify_loss() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = marginlab(&["verify-loss", "--loss", "poly_tail", "--k", "0.5", "--out", out]);
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("assumption_report.json").is_file());
    assert_eq!(marginlab(&["verify-loss", "--loss", "hinge", "--out", out]).status.code(), Some(2));
    assert_eq!(marginlab(&["verify-loss", "--loss", "poly_tail", "--out", out]).status.code(), Some(2));
}

#[test]
fn sweep_with_env_workers() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(r#"{{"base": {RUN}, "sweep": {{"axis": "n", "values": [8, 16]}}}}"#);
    let cfg = write_config(dir.path(), "sweep.json", &body);
    let out = dir.path().join("s");
    let o = Command::new(env!("CARGO_BIN_EXE_marginlab"))
        .args(["sweep", "--config", &cfg, "--out", out.to_str().unwrap()])
        .env("MARGINLAB_WORKERS", "2")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(text.starts_with("n,t,gamma"));
    assert_eq!(text.lines().count(), 1 + 2 * 20);

    let empty = body.replace("[8, 16]", "[]");
    let cfg = write_config(dir.path(), "empty.json", &empty);
    assert_eq!(marginlab(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]).status.code(), Some(2));

    let o = Command::new(env!("CARGO_BIN_EXE_marginlab"))
        .args(["sweep", "--config", &cfg, "--out", out.to_str().unwrap()])
        .env("MARGINLAB_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
