use std::fs;

use marginlab::bounds::{check_tight, TheoremId, TightDirection, DEFAULT_REL_TOL};
use marginlab::data::{gen_separable, load_dataset, save_dataset, Dataset, Provenance};
use marginlab::descent::{run_gd, StepSizePolicy};
use marginlab::oracle::{certify, project_perp};
use marginlab::runner::config::RunConfig;
use marginlab::runner::run::{cmd_check, cmd_run, execute};
use marginlab::{Error, LossFunction};

fn loaded(rows: &[Vec<f64>]) -> Dataset {
    Dataset::from_rows(
        rows,
        Provenance::Loaded {
            path: "inline".into(),
        },
    )
    .unwrap()
}

#[test]
fn labeled_file_through_config() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("points.csv"),
        "# schema=labeled\n1,0.6,0.2\n1,0.5,-0.3\n-1,-0.7,0.1\n-1,-0.4,-0.4\n",
    )
    .unwrap();
    let cfg_path = dir.path().join("cfg.json");
    fs::write(
        &cfg_path,
        r#"{
            "dataset": {"kind": "path", "path": "points.csv"},
            "loss": {"kind": "logistic"},
            "policy": {"kind": "constant_hat_eta", "c": 0.125},
            "steps": 2000,
            "record_every": 100
        }"#,
    )
    .unwrap();
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let out = dir.path().join("run");
    let res = cmd_run(&cfg, &out).unwrap();
    assert_eq!(res.dataset.n(), 4);
    // loaded data is not copied into the run directory
    assert!(!out.join("dataset.csv").exists());
    assert!(res.passed(), "{:#?}", res.reports.iter().filter(|r| !r.passed).collect::<Vec<_>>());
    let chk = cmd_check(&out).unwrap();
    assert_eq!(chk.matches_recorded, Some(true));
}

#[test]
fn saved_dataset_round_trips_bits() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_separable(30, 4, 0.2, 9).unwrap();
    let p = dir.path().join("d.csv");
    save_dataset(&ds, &p).unwrap();
    let back = load_dataset(&p).unwrap();
    assert_eq!(back.as_slice(), ds.as_slice());
    let c1 = certify(&ds, &LossFunction::exp(), 1e-12, None).unwrap();
    let c2 = certify(&back, &LossFunction::exp(), 1e-12, None).unwrap();
    assert_eq!(c1.gamma, c2.gamma);
}

#[test]
fn symmetric_pair_stays_within_upper_formula() {
    // two rows mirrored about the first axis: S_perp = {0}, v_bar = 0
    let ds = loaded(&[vec![-0.6, 0.8], vec![-0.6, -0.8]]);
    let exp = LossFunction::exp();
    let cert = certify(&ds, &exp, 1e-12, None).unwrap();
    assert!((cert.gamma - 0.6).abs() < 1e-12);
    assert!(cert.gamma_prime.is_none());
    let w0 = [0.0, 3.0];
    let tr = run_gd(&ds, &exp, StepSizePolicy::ConstantHatEta { c: 1.0 }, &w0, 3000, 10).unwrap();
    let reps = check_tight(&tr, &cert, &ds, TightDirection::Upper, DEFAULT_REL_TOL).unwrap();
    assert!(reps.iter().all(|r| r.applicable && r.passed));
    // rhs = max(||v0 - v_bar||, 2) + 0 + 2 with gamma' = inf
    let v_bar = cert.v_bar.as_ref().unwrap();
    let bound = 3f64.max(2.0) + 2.0;
    for s in &tr.steps {
        let v = project_perp(&s.w, &cert.u_bar);
        let d = ((v[0] - v_bar[0]).powi(2) + (v[1] - v_bar[1]).powi(2)).sqrt();
        assert!(d <= bound + 1e-9);
    }
}

#[test]
fn v0_at_v_bar_gives_four_plus_spread() {
    let ds = gen_separable(16, 3, 0.25, 2).unwrap();
    let exp = LossFunction::exp();
    let cert = certify(&ds, &exp, 1e-12, None).unwrap();
    let v_bar = cert.v_bar.clone().unwrap();
    let tr = run_gd(&ds, &exp, StepSizePolicy::ConstantHatEta { c: 1.0 }, &v_bar, 500, 50).unwrap();
    let reps = check_tight(&tr, &cert, &ds, TightDirection::Upper, DEFAULT_REL_TOL).unwrap();
    let rhs = reps[0].checks[0].rhs;
    let spread = 2.0 * 16f64.ln() / (cert.gamma * cert.gamma_prime.unwrap());
    assert!((rhs - (4.0 + spread)).abs() < 1e-9 * rhs);
    assert!(reps.iter().all(|r| r.passed));
}

#[test]
fn effective_step_sum_example() {
    // gamma = 0.25, eta = 1, t = 1e4: ln(1 + 0.03125 * 1e4) is about 5.75
    let lb = (1.0f64 + 0.03125 * 1e4).ln();
    assert!((lb - 5.75).abs() < 5e-3);
    let ds = gen_separable(20, 5, 0.25, 0).unwrap();
    let exp = LossFunction::exp();
    let tr = run_gd(&ds, &exp, StepSizePolicy::ConstantEta { eta: 1.0 }, &[0.0; 5], 10_000, 1000).unwrap();
    let gamma = certify(&ds, &exp, 1e-12, None).unwrap().gamma;
    let expected = (1.0 + gamma * gamma * 1e4 / 2.0).ln();
    assert!(tr.last().sums.hat_eta >= expected);
}

#[test]
fn every_policy_and_loss_runs_clean() {
    let base = r#"{
        "dataset": {"kind": "generated", "n": 10, "d": 3, "target_margin": 0.3, "seed": 4},
        "loss": LOSS,
        "policy": POLICY,
        "steps": 400,
        "record_every": 20,
        "tolerances": {"oracle_tol": TOL}
    }"#;
    // the general-loss dual optimum converges slowly, heavy tails most of all
    let cases = [
        (r#"{"kind": "exp"}"#, r#"{"kind": "inverse_sqrt_hat", "c0": 1.0}"#, "1e-12"),
        (r#"{"kind": "exp"}"#, r#"{"kind": "constant_eta", "eta": 0.5}"#, "1e-12"),
        (r#"{"kind": "logistic"}"#, r#"{"kind": "constant_hat_eta", "c": 0.1}"#, "1e-8"),
        (r#"{"kind": "logistic"}"#, r#"{"kind": "logistic_two_phase"}"#, "1e-8"),
        (r#"{"kind": "poly_tail", "k": 2.0}"#, r#"{"kind": "constant_hat_eta", "c": 0.03}"#, "1e-6"),
        (r#"{"kind": "poly_tail", "k": 0.5}"#, r#"{"kind": "inverse_sqrt_hat", "c0": 0.05}"#, "1e-6"),
    ];
    for (loss, policy, tol) in cases {
        let text = base.replace("LOSS", loss).replace("POLICY", policy).replace("TOL", tol);
        let res = execute(&RunConfig::from_json(&text).unwrap()).unwrap();
        let failed: Vec<_> = res.reports.iter().filter(|r| !r.passed).map(|r| r.theorem_id).collect();
        assert!(failed.is_empty(), "{loss} {policy}: {failed:?}");
        let dual = res.report(TheoremId::DualMain).unwrap();
        assert!(dual.applicable, "{loss} {policy}");
    }
}

#[test]
fn increasing_effective_step_aborts() {
    // the aggressive schedule only pins eta_hat for the exponential loss
    let text = r#"{
        "dataset": {"kind": "generated", "n": 10, "d": 3, "target_margin": 0.3, "seed": 4},
        "loss": {"kind": "poly_tail", "k": 0.5},
        "policy": {"kind": "aggressive_risk", "c": 0.5},
        "steps": 400
    }"#;
    let err = execute(&RunConfig::from_json(text).unwrap()).unwrap_err();
    assert!(matches!(err, Error::Numeric { t: 1, .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn wrong_pairings_are_config_errors() {
    let text = r#"{
        "dataset": {"kind": "generated", "n": 10, "d": 3, "target_margin": 0.3},
        "loss": {"kind": "exp"},
        "policy": {"kind": "logistic_two_phase"},
        "steps": 10
    }"#;
    let err = execute(&RunConfig::from_json(text).unwrap()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let err = execute(
        &RunConfig::from_json(&text.replace("logistic_two_phase\"", "aggressive_risk\", \"c\": 2")).unwrap(),
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn tight_lower_on_generated_data_is_usage_error() {
    let ds = gen_separable(8, 2, 0.3, 1).unwrap();
    let exp = LossFunction::exp();
    let cert = certify(&ds, &exp, 1e-12, None).unwrap();
    let tr = run_gd(&ds, &exp, StepSizePolicy::ConstantHatEta { c: 1.0 }, &[0.0; 2], 5, 1).unwrap();
    let err = check_tight(&tr, &cert, &ds, TightDirection::Lower, DEFAULT_REL_TOL).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}
