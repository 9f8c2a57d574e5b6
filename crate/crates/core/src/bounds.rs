//! Rate inequalities evaluated along trajectories against oracle certificates.
//!
//! Every check is stored as `lhs <= rhs` with `slack = (rhs - lhs) / max(1, |rhs|)`.
//! Lower bounds are rewritten into that form, e.g. `margin >= gamma - B` becomes
//! `gamma - margin <= B`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::descent::{detect_warm_start, StepSizePolicy, Trajectory, TrajectoryStep};
use crate::dual::{DualCertificate, MIRROR_TOL, MONOTONE_TOL};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, sub};
use crate::oracle::{project_perp, MarginCertificate};
use crate::smoothed::bregman;

pub const DEFAULT_REL_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TheoremId {
    DualMain,
    BiasMain,
    #[serde(rename = "MarginT_Exp")]
    MarginTExp,
    #[serde(rename = "MarginT_Logistic")]
    MarginTLogistic,
    #[serde(rename = "Tight_Upper")]
    TightUpper,
    #[serde(rename = "Tight_Lower")]
    TightLower,
    MinNormMain,
    #[serde(rename = "MinNormLB")]
    MinNormLb,
    WtNorm,
    #[serde(rename = "SumHetaLB")]
    SumHetaLb,
    RiskRate,
    WarmStart2,
}

impl TheoremId {
    pub fn name(&self) -> &'static str {
        match self {
            TheoremId::DualMain => "DualMain",
            TheoremId::BiasMain => "BiasMain",
            TheoremId::MarginTExp => "MarginT_Exp",
            TheoremId::MarginTLogistic => "MarginT_Logistic",
            TheoremId::TightUpper => "Tight_Upper",
            TheoremId::TightLower => "Tight_Lower",
            TheoremId::MinNormMain => "MinNormMain",
            TheoremId::MinNormLb => "MinNormLB",
            TheoremId::WtNorm => "WtNorm",
            TheoremId::SumHetaLb => "SumHetaLB",
            TheoremId::RiskRate => "RiskRate",
            TheoremId::WarmStart2 => "WarmStart2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub check: String,
    pub t: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    /// The bound carries no information at this `t` (its natural form is negative).
    pub vacuous: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub theorem_id: TheoremId,
    pub applicable: bool,
    pub preconditions_held: bool,
    pub passed: bool,
    pub checked_at: Vec<usize>,
    pub checks: Vec<BoundCheck>,
    pub worst_slack: Option<f64>,
    pub warnings: Vec<String>,
    pub note: Option<String>,
}

impl BoundReport {
    fn new(id: TheoremId) -> Self {
        BoundReport {
            theorem_id: id,
            applicable: true,
            preconditions_held: true,
            passed: false,
            checked_at: Vec::new(),
            checks: Vec::new(),
            worst_slack: None,
            warnings: Vec::new(),
            note: None,
        }
    }

    fn inapplicable(id: TheoremId, preconditions_held: bool, note: impl Into<String>) -> Self {
        let mut r = BoundReport::new(id);
        r.applicable = false;
        r.preconditions_held = preconditions_held;
        r.passed = true;
        r.note = Some(note.into());
        r
    }

    fn push(&mut self, check: &str, t: usize, lhs: f64, rhs: f64, vacuous: bool) {
        self.checks.push(BoundCheck {
            check: check.to_string(),
            t,
            lhs,
            rhs,
            slack: (rhs - lhs) / rhs.abs().max(1.0),
            vacuous,
        });
    }

    /// Sets `passed`, `worst_slack` and `checked_at`. Vacuous checks count as
    /// satisfied; a negative slack on one is still surfaced as a warning.
    fn finish(mut self, rel_tol: f64) -> Self {
        let mut ts: Vec<usize> = self.checks.iter().map(|c| c.t).collect();
        ts.dedup();
        self.checked_at = ts;
        self.worst_slack = self
            .checks
            .iter()
            .filter(|c| !c.vacuous)
            .map(|c| c.slack)
            .reduce(f64::min);
        let bad_vacuous = self
            .checks
            .iter()
            .filter(|c| c.vacuous && !(c.slack >= -rel_tol))
            .count();
        if bad_vacuous > 0 {
            self.warnings
                .push(format!("{bad_vacuous} vacuous checks have negative slack"));
        }
        self.passed = !self.applicable
            || self
                .checks
                .iter()
                .all(|c| c.vacuous || c.slack >= -rel_tol);
        if self.applicable && self.checks.is_empty() {
            self.note.get_or_insert_with(|| "no recorded iteration in range".into());
        }
        self
    }

    pub fn failed_checks(&self, rel_tol: f64) -> Vec<&BoundCheck> {
        self.checks
            .iter()
            .filter(|c| !c.vacuous && !(c.slack >= -rel_tol))
            .collect()
    }
}

/// Step sizes were valid from the first iteration on.
fn preconditions_from_start(traj: &Trajectory) -> bool {
    traj.preconditions_from == Some(0) || traj.steps_run == 0
}

/// Folds a dual certificate into the common report shape.
pub fn dual_main_report(cert: &DualCertificate, rel_tol: f64) -> BoundReport {
    if !cert.applicable {
        let note = cert.note.clone().unwrap_or_else(|| "step-size requirements never held".into());
        return BoundReport::inapplicable(TheoremId::DualMain, false, note).finish(rel_tol);
    }
    let mut r = BoundReport::new(TheoremId::DualMain);
    let start = cert.start_t.unwrap_or(0);
    r.preconditions_held = start == 0;
    if start > 0 {
        r.note = Some(format!("certified from t = {start}, where the step-size requirements begin to hold"));
    }
    r.push("mirror_identity", start, cert.mirror_identity_max_err, MIRROR_TOL, false);
    r.push("f_monotone", start, cert.f_worst_violation, MONOTONE_TOL, false);
    let groups = [
        ("telescoping", &cert.telescoping),
        ("psi_decrease", &cert.psi_decrease),
        ("rate_bound", &cert.rate_bound),
        ("psi_telescoped", &cert.psi_telescoped),
    ];
    for (name, pts) in groups {
        for s in pts.iter() {
            r.push(name, s.t_next, s.lhs, s.rhs, false);
        }
    }
    r.checks.sort_by_key(|c| c.t);
    let mut r = r.finish(rel_tol);
    r.passed &= cert.passed;
    r
}

/// Dual convergence and directional alignment with `-Z^T qbar`.
pub fn check_bias_main(traj: &Trajectory, cert: &MarginCertificate, rel_tol: f64) -> Result<BoundReport> {
    let id = TheoremId::BiasMain;
    if !preconditions_from_start(traj) {
        return Ok(BoundReport::inapplicable(
            id,
            false,
            "effective step not nonincreasing within 1/beta from t = 0",
        )
        .finish(rel_tol));
    }
    let s0 = traj.first();
    let d0 = bregman(&cert.qbar, &s0.dual)?;
    let ztq_bar_norm = norm(&cert.ztq_bar);
    let w0_norm = norm(&traj.w0);
    let delta = (s0.psi_val + s0.eta_hat * s0.f_val + w0_norm * ztq_bar_norm) / (2.0 * cert.f_qbar);
    let target: Vec<f64> = cert.ztq_bar.iter().map(|x| -x / ztq_bar_norm).collect();

    let mut r = BoundReport::new(id);
    for s in traj.steps.iter().filter(|s| s.t > 0 && s.psi_val <= 0.0) {
        let h = s.sums.hat_eta;
        let diff = sub(&s.ztq, &cert.ztq_bar);
        r.push("dual_distance", s.t, dot(&diff, &diff), 2.0 * d0 / h, false);
        let cos = dot(&s.w, &target) / s.w_norm;
        let bound = 1.0 - delta / h;
        r.push("alignment", s.t, 1.0 - cos, delta / h, bound < 0.0);
    }
    if r.checks.is_empty() {
        return Ok(BoundReport::inapplicable(id, true, "no recorded iteration with psi <= 0").finish(rel_tol));
    }
    r.note = Some(format!("delta = {delta:.6e}"));
    Ok(r.finish(rel_tol))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginVariant {
    Exp,
    LogisticTwoPhase,
}

/// Normalized margin lower bounds.
pub fn check_margin_rate(
    traj: &Trajectory,
    cert: &MarginCertificate,
    variant: MarginVariant,
    rel_tol: f64,
) -> Result<BoundReport> {
    let gamma = cert.gamma;
    let n = traj.n as f64;
    match variant {
        MarginVariant::Exp => {
            if !traj.loss.is_exp() {
                return Err(Error::usage("exponential margin rate needs the exponential loss"));
            }
            let id = TheoremId::MarginTExp;
            if !traj.w0_is_zero() || !preconditions_from_start(traj) {
                return Ok(BoundReport::inapplicable(
                    id,
                    false,
                    "needs w0 = 0 and nonincreasing eta_hat <= 1",
                )
                .finish(rel_tol));
            }
            let mut r = BoundReport::new(id);
            for s in traj.steps.iter().filter(|s| s.t > 0) {
                let b = (n.ln() + 1.0) / (gamma * s.sums.hat_eta);
                push_margin_pair(&mut r, s, gamma, b);
            }
            Ok(r.finish(rel_tol))
        }
        MarginVariant::LogisticTwoPhase => {
            if !traj.loss.is_logistic() || traj.policy != StepSizePolicy::LogisticTwoPhase {
                return Err(Error::usage(
                    "logistic margin rate needs the logistic loss with the two-phase policy",
                ));
            }
            let id = TheoremId::MarginTLogistic;
            if !traj.w0_is_zero() {
                return Ok(BoundReport::inapplicable(id, false, "needs w0 = 0").finish(rel_tol));
            }
            let ws = match detect_warm_start(traj, gamma) {
                Ok(ws) => ws,
                Err(e) => return Ok(BoundReport::inapplicable(id, true, e.to_string()).finish(rel_tol)),
            };
            let s0 = traj.step_at(ws.t0).expect("warm start step is recorded");
            let c = 256.0 * n.ln();
            let mut r = BoundReport::new(id);
            for s in traj.steps.iter().filter(|s| s.t > ws.t0) {
                // bound through the measured warm-start iterate
                let num = s0.psi_val + 0.5 * s0.eta_hat * s0.ztq_norm * s0.ztq_norm + s0.w_norm * gamma;
                let den = s0.w_norm + (s.sums.hat_eta_ztq - s0.sums.hat_eta_ztq);
                let b = num / den;
                r.push("psi_margin_from_t0", s.t, gamma + s.psi_val / s.w_norm, b, gamma - b < 0.0);
                // stated bound, defined once the denominator is positive
                let den = gamma * s.t as f64 - c * c / gamma;
                if den > 0.0 {
                    let b = (1.0 + 2.0 * c) / den;
                    push_margin_pair(&mut r, s, gamma, b);
                }
            }
            r.checks.sort_by_key(|c| c.t);
            if !r.checks.iter().any(|c| c.check == "psi_margin") {
                r.warnings.push(format!(
                    "stated bound only active for t > {:.3e}; no recorded iteration reached it",
                    c * c / (gamma * gamma)
                ));
            }
            Ok(r.finish(rel_tol))
        }
    }
}

fn push_margin_pair(r: &mut BoundReport, s: &TrajectoryStep, gamma: f64, b: f64) {
    let vac = gamma - b < 0.0;
    // raw margin dominates the smoothed one
    r.push("raw_vs_psi", s.t, -s.psi_val / s.w_norm, s.raw_margin / s.w_norm, false);
    r.push("psi_margin", s.t, gamma + s.psi_val / s.w_norm, b, vac);
    r.push("raw_margin", s.t, gamma - s.raw_margin / s.w_norm, b, vac);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TightDirection {
    Upper,
    Lower,
}

/// Bias-rate upper or lower bound. Returns the norm bound on the orthogonal
/// component followed by the directional bound.
pub fn check_tight(
    traj: &Trajectory,
    cert: &MarginCertificate,
    ds: &Dataset,
    direction: TightDirection,
    rel_tol: f64,
) -> Result<Vec<BoundReport>> {
    let u = &cert.u_bar;
    let ln_n = (traj.n as f64).ln();
    match direction {
        TightDirection::Upper => {
            let (id_v, id_d) = (TheoremId::MinNormMain, TheoremId::TightUpper);
            let ok = traj.loss.is_exp() && preconditions_from_start(traj);
            let v_bar = match (&cert.v_bar, ok) {
                (_, false) => {
                    let why = "needs the exponential loss with nonincreasing eta_hat <= 1";
                    return Ok(vec![
                        BoundReport::inapplicable(id_v, false, why).finish(rel_tol),
                        BoundReport::inapplicable(id_d, false, why).finish(rel_tol),
                    ]);
                }
                (None, _) => {
                    let why = cert.perp_note.clone().unwrap_or_else(|| "no orthogonal minimizer".into());
                    return Ok(vec![
                        BoundReport::inapplicable(id_v, false, why.clone()).finish(rel_tol),
                        BoundReport::inapplicable(id_d, false, why).finish(rel_tol),
                    ]);
                }
                (Some(v), true) => v,
            };
            let v0 = project_perp(&traj.w0, u);
            let spread = match cert.gamma_prime {
                Some(gp) => 2.0 * ln_n / (cert.gamma * gp),
                None => 0.0,
            };
            let rhs = norm(&sub(&v0, v_bar)).max(2.0) + spread + 2.0;
            let mut rv = BoundReport::new(id_v);
            let mut rd = BoundReport::new(id_d);
            for s in &traj.steps {
                let v = project_perp(&s.w, u);
                rv.push("v_distance", s.t, norm(&sub(&v, v_bar)), rhs, false);
                if s.w_norm > 0.0 && dot(&s.w, u) >= 0.0 {
                    let dir: Vec<f64> = s.w.iter().zip(u).map(|(w, ui)| w / s.w_norm - ui).collect();
                    rd.push("direction_gap", s.t, norm(&dir), std::f64::consts::SQRT_2 * norm(&v) / s.w_norm, false);
                }
            }
            rv.note = Some(format!("bound {rhs:.6e}"));
            if let StepSizePolicy::ConstantEta { .. } = traj.policy {
                growth_warnings(traj, cert.gamma, &mut rd);
            }
            Ok(vec![rv.finish(rel_tol), rd.finish(rel_tol)])
        }
        TightDirection::Lower => {
            if !ds.is_lower_bound() {
                return Err(Error::usage("the lower-bound check needs the lower-bound dataset"));
            }
            let (id_v, id_d) = (TheoremId::MinNormLb, TheoremId::TightLower);
            if !traj.w0_is_zero() || !traj.loss.is_exp() {
                let why = "needs the exponential loss from w0 = 0";
                return Ok(vec![
                    BoundReport::inapplicable(id_v, false, why).finish(rel_tol),
                    BoundReport::inapplicable(id_d, false, why).finish(rel_tol),
                ]);
            }
            let ln_thr = (2.0 / traj.n as f64).ln();
            let Some(tau) = traj.steps.iter().position(|s| s.ln_risk < ln_thr) else {
                let why = format!(
                    "risk never fell below 2/n in {} steps (final risk {:.3e})",
                    traj.steps_run,
                    traj.last().risk
                );
                return Ok(vec![
                    BoundReport::inapplicable(id_v, true, why.clone()).finish(rel_tol),
                    BoundReport::inapplicable(id_d, true, why).finish(rel_tol),
                ]);
            };
            let floor = ln_n - std::f64::consts::LN_2;
            let mut rv = BoundReport::new(id_v);
            let mut rd = BoundReport::new(id_d);
            for s in &traj.steps[tau..] {
                let v = project_perp(&s.w, u);
                rv.push("v_norm_floor", s.t, floor, norm(&v), false);
                let dir: Vec<f64> = s.w.iter().zip(u).map(|(w, ui)| w / s.w_norm - ui).collect();
                rd.push("direction_gap_floor", s.t, floor / s.w_norm, norm(&dir), false);
            }
            rv.note = Some(format!("tau = {} (first recorded t with R < 2/n)", traj.steps[tau].t));
            Ok(vec![rv.finish(rel_tol), rd.finish(rel_tol)])
        }
    }
}

/// `||w_t|| / ln t` against the band `[gamma / 2, 2 / gamma^2]` for `t >= 1000`.
fn growth_warnings(traj: &Trajectory, gamma: f64, r: &mut BoundReport) {
    let (lo, hi) = (gamma / 2.0, 2.0 / (gamma * gamma));
    for s in traj.steps.iter().filter(|s| s.t >= 1000) {
        let ratio = s.w_norm / (s.t as f64).ln();
        if ratio < lo || ratio > hi {
            r.warnings.push(format!(
                "t = {}: ||w||/ln t = {ratio:.4} outside [{lo:.4}, {hi:.4}]",
                s.t
            ));
        }
    }
}

/// Norm sandwich, effective-step sum, and risk decay for the exponential loss.
pub fn check_norm_and_sum_bounds(traj: &Trajectory, cert: &MarginCertificate, rel_tol: f64) -> Vec<BoundReport> {
    let gamma = cert.gamma;
    let mut out = Vec::new();

    let norm_ok = traj.w0_is_zero()
        && (traj.loss.is_logistic() || (traj.loss.is_exp() && preconditions_from_start(traj)));
    if norm_ok {
        let mut r = BoundReport::new(TheoremId::WtNorm);
        for s in &traj.steps {
            let h = s.sums.hat_eta;
            r.push("lower", s.t, gamma * h, s.w_norm, false);
            if traj.loss.is_exp() {
                r.push("upper", s.t, s.w_norm, h, false);
            }
        }
        out.push(r.finish(rel_tol));
    } else {
        out.push(
            BoundReport::inapplicable(
                TheoremId::WtNorm,
                false,
                "needs w0 = 0 and the exponential loss with nonincreasing eta_hat <= 1, or the logistic loss",
            )
            .finish(rel_tol),
        );
    }

    let eta = match traj.policy {
        StepSizePolicy::ConstantEta { eta } if eta <= 1.0 => Some(eta),
        _ => None,
    };
    match eta {
        Some(eta) if traj.loss.is_exp() && traj.w0_is_zero() => {
            let mut rs = BoundReport::new(TheoremId::SumHetaLb);
            let mut rr = BoundReport::new(TheoremId::RiskRate);
            for s in &traj.steps {
                let x = eta * gamma * gamma * s.t as f64 / 2.0;
                rs.push("sum_eta_hat", s.t, x.ln_1p(), s.sums.hat_eta, false);
                rr.push("risk", s.t, s.risk, 1.0 / (1.0 + x), false);
            }
            out.push(rs.finish(rel_tol));
            out.push(rr.finish(rel_tol));
        }
        _ => {
            let why = "needs the exponential loss with constant eta <= 1 from w0 = 0";
            out.push(BoundReport::inapplicable(TheoremId::SumHetaLb, false, why).finish(rel_tol));
            out.push(BoundReport::inapplicable(TheoremId::RiskRate, false, why).finish(rel_tol));
        }
    }
    out
}

/// Warm-start count and norm bounds for the two-phase logistic schedule.
pub fn check_warm_start(traj: &Trajectory, gamma: f64, rel_tol: f64) -> BoundReport {
    let id = TheoremId::WarmStart2;
    if traj.policy != StepSizePolicy::LogisticTwoPhase || !traj.w0_is_zero() {
        return BoundReport::inapplicable(id, false, "needs the two-phase logistic schedule from w0 = 0")
            .finish(rel_tol);
    }
    match detect_warm_start(traj, gamma) {
        Err(e) => {
            let mut r = BoundReport::new(id);
            r.note = Some(e.to_string());
            r.push("reached", traj.steps_run, 1.0, 0.0, false);
            r.finish(rel_tol)
        }
        Ok(ws) => {
            let mut r = BoundReport::new(id);
            r.push("psi_at_t0", ws.t0, ws.psi, 0.0, false);
            if ws.bounds_apply {
                r.push("t0", ws.t0, ws.t0 as f64, ws.bound_t0, false);
                r.push("w_norm_at_t0", ws.t0, ws.w_norm, ws.bound_w_norm, false);
            } else {
                r.warnings.push("count and norm bounds are void for a single example".into());
            }
            r.note = Some(format!("t0 = {}, ||w_t0|| = {:.6e}", ws.t0, ws.w_norm));
            r.finish(rel_tol)
        }
    }
}
