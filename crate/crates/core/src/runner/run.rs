//! Single-run orchestration and artifact persistence.
//!
//! A run directory holds:
//!
//! - `run.json`: resolved config and trajectory bookkeeping
//! - `dataset.csv`: folded rows, for generated and lower-bound data
//! - `trajectory.csv`: one row per recorded iteration, iterate included
//! - `certificate.json`, `dual_certificate.json`, `reports.json`
//! - `plotdata/<theorem>_<check>.csv` with columns `t,lhs,rhs,slack`

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bounds::{
    check_bias_main, check_margin_rate, check_norm_and_sum_bounds, check_tight, check_warm_start,
    dual_main_report, BoundReport, MarginVariant, TightDirection,
};
use crate::data::{save_dataset, Dataset};
use crate::descent::{rebuild_step, run_gd, CumulativeSums, StepSizePolicy, Trajectory};
use crate::dual::{certify_dual_main, DualCertificate};
use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::loss::{default_b_grid, default_z_grid, verify_assumption2, AssumptionReport, LossFunction};
use crate::oracle::{certify, MarginCertificate};

use super::config::{DatasetSpec, RunConfig};
use super::io::{fmt_f64, write_atomic, write_json};

/// Everything a run computes, before anything touches the disk.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub dataset: Dataset,
    pub trajectory: Trajectory,
    pub certificate: MarginCertificate,
    pub dual: DualCertificate,
    pub reports: Vec<BoundReport>,
}

impl RunResult {
    /// All applicable reports passed.
    pub fn passed(&self) -> bool {
        self.reports.iter().all(|r| r.passed)
    }

    pub fn report(&self, id: crate::bounds::TheoremId) -> Option<&BoundReport> {
        self.reports.iter().find(|r| r.theorem_id == id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    pub config: RunConfig,
    pub n: usize,
    pub d: usize,
    pub w0: Vec<f64>,
    pub steps_run: usize,
    pub record_every: usize,
    pub recorded: usize,
    pub mirror_max_err: f64,
    pub risk_descent_max_violation: f64,
    pub phase_switch: Option<usize>,
    pub preconditions_from: Option<usize>,
    pub eta_hat_monotone_from: usize,
    pub passed: bool,
}

/// Runs the configured experiment in memory.
pub fn execute(cfg: &RunConfig) -> Result<RunResult> {
    let ds = cfg.build_dataset()?;
    let w0 = cfg.w0(ds.d());
    let traj = run_gd(&ds, &cfg.loss, cfg.policy, &w0, cfg.steps, cfg.record_every)?;
    let cert = certify(&ds, &cfg.loss, cfg.tolerances.oracle_tol, cfg.tolerances.support_tol)?;
    finish(ds, traj, cert, cfg.tolerances.rel_tol)
}

fn finish(ds: Dataset, traj: Trajectory, cert: MarginCertificate, rel_tol: f64) -> Result<RunResult> {
    let dual = certify_dual_main(&traj, &cert.qbar, &ds)?;
    let reports = evaluate_reports(&traj, &cert, &dual, &ds, rel_tol)?;
    Ok(RunResult {
        dataset: ds,
        trajectory: traj,
        certificate: cert,
        dual,
        reports,
    })
}

/// Every report relevant to the loss, policy and dataset of the run.
pub fn evaluate_reports(
    traj: &Trajectory,
    cert: &MarginCertificate,
    dual: &DualCertificate,
    ds: &Dataset,
    rel_tol: f64,
) -> Result<Vec<BoundReport>> {
    let mut out = vec![dual_main_report(dual, rel_tol), check_bias_main(traj, cert, rel_tol)?];
    if traj.loss.is_exp() {
        out.push(check_margin_rate(traj, cert, MarginVariant::Exp, rel_tol)?);
    }
    if traj.policy == StepSizePolicy::LogisticTwoPhase {
        out.push(check_margin_rate(traj, cert, MarginVariant::LogisticTwoPhase, rel_tol)?);
        out.push(check_warm_start(traj, cert.gamma, rel_tol));
    }
    out.extend(check_tight(traj, cert, ds, TightDirection::Upper, rel_tol)?);
    if ds.is_lower_bound() {
        out.extend(check_tight(traj, cert, ds, TightDirection::Lower, rel_tol)?);
    }
    out.extend(check_norm_and_sum_bounds(traj, cert, rel_tol));
    Ok(out)
}

/// Runs and writes all artifacts under `out`.
pub fn cmd_run(cfg: &RunConfig, out: &Path) -> Result<RunResult> {
    let res = execute(cfg)?;
    write_run(cfg, &res, out)?;
    Ok(res)
}

fn meta_for(cfg: &RunConfig, res: &RunResult) -> RunMeta {
    let mut config = cfg.clone();
    config.out = None;
    if let DatasetSpec::Generated { seed, .. } = &mut config.dataset {
        *seed = Some(cfg.generator_seed());
    }
    let tr = &res.trajectory;
    RunMeta {
        config,
        n: tr.n,
        d: tr.d,
        w0: tr.w0.clone(),
        steps_run: tr.steps_run,
        record_every: tr.record_every,
        recorded: tr.steps.len(),
        mirror_max_err: tr.mirror_max_err,
        risk_descent_max_violation: tr.risk_descent_max_violation,
        phase_switch: tr.phase_switch,
        preconditions_from: tr.preconditions_from,
        eta_hat_monotone_from: tr.eta_hat_monotone_from,
        passed: res.passed(),
    }
}

pub fn write_run(cfg: &RunConfig, res: &RunResult, out: &Path) -> Result<()> {
    write_json(&out.join("run.json"), &meta_for(cfg, res))?;
    if !matches!(cfg.dataset, DatasetSpec::Path { .. }) {
        save_dataset(&res.dataset, &out.join("dataset.csv"))?;
    }
    write_atomic(&out.join("trajectory.csv"), trajectory_csv(&res.trajectory, Some(&res.certificate.u_bar)).as_bytes())?;
    write_json(&out.join("certificate.json"), &res.certificate)?;
    write_json(&out.join("dual_certificate.json"), &res.dual)?;
    write_reports(&res.reports, out, "reports.json")
}

fn write_reports(reports: &[BoundReport], out: &Path, name: &str) -> Result<()> {
    write_json(&out.join(name), &reports)?;
    for (file, text) in plot_data(reports) {
        write_atomic(&out.join("plotdata").join(file), text.as_bytes())?;
    }
    Ok(())
}

/// One CSV per (report, check) pair with columns `t,lhs,rhs,slack`.
pub fn plot_data(reports: &[BoundReport]) -> BTreeMap<String, String> {
    let mut files: BTreeMap<String, String> = BTreeMap::new();
    for r in reports.iter().filter(|r| r.applicable) {
        for c in &r.checks {
            let text = files
                .entry(format!("{}_{}.csv", r.theorem_id.name(), c.check))
                .or_insert_with(|| "t,lhs,rhs,slack,vacuous\n".to_string());
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                c.t,
                fmt_f64(c.lhs),
                fmt_f64(c.rhs),
                fmt_f64(c.slack),
                u8::from(c.vacuous)
            ));
        }
    }
    files
}

const TRAJECTORY_COLUMNS: [&str; 18] = [
    "t",
    "eta",
    "ln_eta",
    "eta_hat",
    "risk",
    "ln_risk",
    "psi",
    "f_dual",
    "ztq_norm",
    "q_l1",
    "raw_margin",
    "w_norm",
    "normalized_margin",
    "cos_to_ubar",
    "sum_eta_hat",
    "sum_eta_hat_f",
    "sum_eta_hat_f_next",
    "sum_eta_hat_ztq_norm",
];

/// `cos_to_ubar` is left as `nan` when no max-margin direction is given.
pub fn trajectory_csv(traj: &Trajectory, u_bar: Option<&[f64]>) -> String {
    let mut header: Vec<String> = TRAJECTORY_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..traj.d).map(|i| format!("w_{i}")));
    let mut out = header.join(",");
    out.push('\n');
    for s in &traj.steps {
        let mut cells = vec![s.t.to_string()];
        let vals = [
            s.eta,
            s.ln_eta,
            s.eta_hat,
            s.risk,
            s.ln_risk,
            s.psi_val,
            s.f_val,
            s.ztq_norm,
            s.q_l1,
            s.raw_margin,
            s.w_norm,
            s.normalized_margin().unwrap_or(f64::NAN),
            u_bar.map_or(f64::NAN, |u| cosine(&s.w, u)),
            s.sums.hat_eta,
            s.sums.hat_eta_f,
            s.sums.hat_eta_f_next,
            s.sums.hat_eta_ztq,
        ];
        cells.extend(vals.iter().chain(&s.w).map(|&x| fmt_f64(x)));
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Rebuilds a trajectory from `trajectory.csv` text and the run bookkeeping.
pub fn parse_trajectory(text: &str, meta: &RunMeta, ds: &Dataset) -> Result<Trajectory> {
    let bad = |line: usize, msg: String| Error::Load {
        path: PathBuf::from("trajectory.csv"),
        row: line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let width = TRAJECTORY_COLUMNS.len() + meta.d;
    if cols.len() != width || cols[..TRAJECTORY_COLUMNS.len()] != TRAJECTORY_COLUMNS {
        return Err(bad(1, "unexpected header".into()));
    }
    let idx = |name: &str| TRAJECTORY_COLUMNS.iter().position(|c| *c == name).unwrap();
    let mut steps = Vec::new();
    for (i, line) in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width {
            return Err(bad(i + 1, format!("has {} fields, expected {width}", cells.len())));
        }
        let t: usize = cells[0]
            .parse()
            .map_err(|_| bad(i + 1, format!("bad iteration {:?}", cells[0])))?;
        let vals = cells[1..]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| bad(i + 1, format!("bad number {c:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        let v = |name: &str| vals[idx(name) - 1];
        let sums = CumulativeSums {
            hat_eta: v("sum_eta_hat"),
            hat_eta_f: v("sum_eta_hat_f"),
            hat_eta_f_next: v("sum_eta_hat_f_next"),
            hat_eta_ztq: v("sum_eta_hat_ztq_norm"),
        };
        let w = vals[TRAJECTORY_COLUMNS.len() - 1..].to_vec();
        steps.push(rebuild_step(ds, &meta.config.loss, t, w, v("ln_eta"), v("eta_hat"), sums)?);
    }
    if steps.is_empty() {
        return Err(bad(2, "no recorded iterations".into()));
    }
    Ok(Trajectory {
        loss: meta.config.loss,
        policy: meta.config.policy,
        n: meta.n,
        d: meta.d,
        w0: meta.w0.clone(),
        steps_run: meta.steps_run,
        record_every: meta.record_every,
        steps,
        mirror_max_err: meta.mirror_max_err,
        risk_descent_max_violation: meta.risk_descent_max_violation,
        phase_switch: meta.phase_switch,
        preconditions_from: meta.preconditions_from,
        eta_hat_monotone_from: meta.eta_hat_monotone_from,
    })
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub result: RunResult,
    /// Whether the fresh reports match `reports.json` byte for byte, when that file exists.
    pub matches_recorded: Option<bool>,
}

/// Re-certifies a run directory from its logged trajectory. Writes `check_reports.json`.
pub fn cmd_check(dir: &Path) -> Result<CheckOutcome> {
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read_to_string(&p).map_err(|e| Error::io(format!("reading {}", p.display()), e))
    };
    let meta: RunMeta = serde_json::from_str(&read("run.json")?)
        .map_err(|e| Error::config(format!("run.json: {e}")))?;
    let cfg = &meta.config;
    let ds = cfg.build_dataset()?;
    if (ds.n(), ds.d()) != (meta.n, meta.d) {
        return Err(Error::config("dataset shape differs from the recorded run"));
    }
    let traj = parse_trajectory(&read("trajectory.csv")?, &meta, &ds)?;
    let cert = certify(&ds, &cfg.loss, cfg.tolerances.oracle_tol, cfg.tolerances.support_tol)?;
    let result = finish(ds, traj, cert, cfg.tolerances.rel_tol)?;
    write_json(&dir.join("check_reports.json"), &result.reports)?;
    let mut fresh = serde_json::to_string_pretty(&result.reports)?;
    fresh.push('\n');
    let matches_recorded = read("reports.json").ok().map(|old| old == fresh);
    Ok(CheckOutcome {
        result,
        matches_recorded,
    })
}

/// Runs the assumption verifier on the default grids and writes `assumption_report.json`.
pub fn cmd_verify_loss(loss: &LossFunction, out: &Path) -> Result<AssumptionReport> {
    let report = verify_assumption2(loss, &default_z_grid(loss), &default_b_grid())?;
    write_json(&out.join("assumption_report.json"), &report)?;
    Ok(report)
}

/// Builds the configured dataset and writes it to `out/dataset.csv`.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let ds = cfg.build_dataset()?;
    save_dataset(&ds, &out.join("dataset.csv"))?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::TheoremId;

    fn cfg(text: &str) -> RunConfig {
        RunConfig::from_json(text).unwrap()
    }

    const EXP: &str = r#"{
        "dataset": {"kind": "generated", "n": 12, "d": 3, "target_margin": 0.25, "seed": 3},
        "loss": {"kind": "exp"},
        "policy": {"kind": "constant_hat_eta", "c": 1.0},
        "steps": 300,
        "record_every": 7
    }"#;

    #[test]
    fn exp_run_reports() {
        let res = execute(&cfg(EXP)).unwrap();
        assert!(res.passed());
        for id in [
            TheoremId::DualMain,
            TheoremId::BiasMain,
            TheoremId::MarginTExp,
            TheoremId::MinNormMain,
            TheoremId::TightUpper,
            TheoremId::WtNorm,
        ] {
            assert!(res.report(id).unwrap().applicable, "{id:?}");
        }
        assert!(res.report(TheoremId::MinNormLb).is_none());
        assert!(!res.report(TheoremId::RiskRate).unwrap().applicable);
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let c = cfg(EXP);
        let res = execute(&c).unwrap();
        let meta = meta_for(&c, &res);
        let text = trajectory_csv(&res.trajectory, Some(&res.certificate.u_bar));
        let back = parse_trajectory(&text, &meta, &res.dataset).unwrap();
        assert_eq!(back.steps, res.trajectory.steps);
        let bad = text.replacen(",", ";", 3);
        assert!(parse_trajectory(&bad, &meta, &res.dataset).is_err());
    }

    #[test]
    fn write_and_check() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(EXP);
        let res = cmd_run(&c, dir.path()).unwrap();
        for f in [
            "run.json",
            "dataset.csv",
            "trajectory.csv",
            "certificate.json",
            "reports.json",
            "plotdata/MarginT_Exp_raw_margin.csv",
        ] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let chk = cmd_check(dir.path()).unwrap();
        assert_eq!(chk.matches_recorded, Some(true));
        assert_eq!(chk.result.passed(), res.passed());
    }

    #[test]
    fn lower_bound_run_has_lower_reports() {
        let text = r#"{
            "dataset": {"kind": "lower_bound", "n": 32},
            "loss": {"kind": "exp"},
            "policy": {"kind": "constant_hat_eta", "c": 1.0},
            "steps": 2000,
            "record_every": 50
        }"#;
        let res = execute(&cfg(text)).unwrap();
        let lb = res.report(TheoremId::MinNormLb).unwrap();
        assert!(lb.applicable && lb.passed);
        assert!(res.passed());
    }

    #[test]
    fn verify_loss_writes_report() {
        let dir = tempfile::tempdir().unwrap();
        let r = cmd_verify_loss(&LossFunction::logistic(), dir.path()).unwrap();
        assert!(r.passed);
        assert!(dir.path().join("assumption_report.json").is_file());
    }
}
