//! Dual view of a trajectory: the objective `f(q) = ||Z^T q||^2 / 2`, the mirror
//! step identity, and the descent and rate inequalities satisfied by `q_t`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::descent::{Trajectory, TrajectoryStep};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm_inf};
use crate::loss::LossFunction;
use crate::smoothed::{bregman, grad_psi, DualPoint};

pub const SLACK_FLOOR: f64 = -1e-9;
pub const MIRROR_TOL: f64 = 1e-9;
pub const MONOTONE_TOL: f64 = 1e-12;

pub fn dual_objective(ds: &Dataset, q: &[f64]) -> Result<f64> {
    if q.len() != ds.n() {
        return Err(Error::domain(format!(
            "dual point has {} coordinates, data has {} rows",
            q.len(),
            ds.n()
        )));
    }
    let v = ds.ztq(q);
    Ok(0.5 * dot(&v, &v))
}

/// `grad f(q) = Z Z^T q`, evaluated without forming `Z Z^T`.
pub fn grad_dual_objective(ds: &Dataset, q: &[f64]) -> Result<Vec<f64>> {
    if q.len() != ds.n() {
        return Err(Error::domain("dual point dimension mismatch"));
    }
    Ok(ds.zw(&ds.ztq(q)))
}

/// One inequality `lhs <= rhs` evaluated between iterations `t` and `t_next`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlackPoint {
    pub t: usize,
    pub t_next: usize,
    pub lhs: f64,
    pub rhs: f64,
    /// `(rhs - lhs) / max(1, |rhs|)`
    pub slack: f64,
}

impl SlackPoint {
    pub fn new(t: usize, t_next: usize, lhs: f64, rhs: f64) -> Self {
        SlackPoint {
            t,
            t_next,
            lhs,
            rhs,
            slack: (rhs - lhs) / rhs.abs().max(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MirrorCheck {
    pub t: usize,
    pub p_err: f64,
    pub q_err: f64,
    pub err: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Checks `p_{t+1} = p_t - eta_hat_t Z Z^T q_t` and `q_{t+1} = grad psi(p_{t+1})`.
pub fn certify_mirror_step(
    ds: &Dataset,
    loss: &LossFunction,
    a: &TrajectoryStep,
    b: &TrajectoryStep,
) -> Result<MirrorCheck> {
    if b.t != a.t + 1 {
        return Err(Error::usage(format!(
            "mirror step needs consecutive iterations, got {} and {}",
            a.t, b.t
        )));
    }
    let zztq = ds.zw(&ds.ztq(a.q()));
    let p_err = b
        .p()
        .iter()
        .zip(a.p().iter().zip(&zztq))
        .map(|(x, (y, g))| (x - (y - a.eta_hat * g)).abs())
        .fold(0.0, f64::max);
    let fresh = grad_psi(loss, b.p())?;
    let q_err = fresh
        .q
        .iter()
        .zip(b.q())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let err = p_err.max(q_err);
    let tol = MIRROR_TOL * norm_inf(a.p()).max(1.0);
    Ok(MirrorCheck {
        t: a.t,
        p_err,
        q_err,
        err,
        tol,
        passed: err <= tol,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualCertificate {
    pub applicable: bool,
    /// First recorded iteration from which the step-size requirements hold.
    pub start_t: Option<usize>,
    /// Largest mirror identity error: in-run over every step, and over recorded consecutive pairs.
    pub mirror_identity_max_err: f64,
    pub mirror_pairs_checked: usize,
    pub f_monotone: bool,
    pub f_worst_violation: f64,
    /// `sum eta_hat_j (f(q_{j+1}) - f(qbar)) <= D(qbar, q_t) - D(qbar, q_t')`
    pub telescoping: Vec<SlackPoint>,
    /// `sum eta_hat_j (f(q_j) + f(q_{j+1})) <= psi(p_t) - psi(p_t')`
    pub psi_decrease: Vec<SlackPoint>,
    /// `f(q_t') - f(qbar) <= D(qbar, q_t) / sum eta_hat_j`
    pub rate_bound: Vec<SlackPoint>,
    /// `sum eta_hat_j ||Z^T q_j||^2 - eta_hat_t ||Z^T q_t||^2 / 2 <= psi(p_t) - psi(p_t')`
    pub psi_telescoped: Vec<SlackPoint>,
    pub worst_slack: f64,
    pub passed: bool,
    pub note: Option<String>,
}

/// Certifies descent and rate inequalities for every recorded pair.
///
/// The inequalities hold over any window of iterations where the effective step
/// is nonincreasing and within `1/beta`; the window starts at the first recorded
/// iteration from which that is true until the end of the run. Sums over
/// unrecorded iterations come from the trajectory's running totals.
pub fn certify_dual_main(traj: &Trajectory, qbar: &DualPoint, ds: &Dataset) -> Result<DualCertificate> {
    if qbar.len() != ds.n() {
        return Err(Error::domain("comparator dimension mismatch"));
    }
    let f_bar = dual_objective(ds, &qbar.q)?;

    let mut mirror = traj.mirror_max_err;
    let mut pairs = 0;
    for w in traj.steps.windows(2) {
        if w[1].t == w[0].t + 1 {
            let chk = certify_mirror_step(ds, &traj.loss, &w[0], &w[1])?;
            mirror = mirror.max(chk.err / norm_inf(w[0].p()).max(1.0));
            pairs += 1;
        }
    }

    let start = traj
        .preconditions_from
        .and_then(|s| traj.steps.iter().position(|st| st.t >= s))
        .filter(|&i| i + 1 < traj.steps.len());
    let Some(start) = start else {
        return Ok(DualCertificate {
            applicable: false,
            start_t: None,
            mirror_identity_max_err: mirror,
            mirror_pairs_checked: pairs,
            f_monotone: false,
            f_worst_violation: 0.0,
            telescoping: vec![],
            psi_decrease: vec![],
            rate_bound: vec![],
            psi_telescoped: vec![],
            worst_slack: 0.0,
            passed: mirror <= MIRROR_TOL,
            note: Some("step-size requirements do not hold between any two recorded iterations".into()),
        });
    };
    let steps = &traj.steps[start..];
    let s0 = &steps[0];
    let d0 = bregman(qbar, &s0.dual)?;

    let mut f_worst = 0.0f64;
    let mut telescoping = Vec::new();
    let mut psi_decrease = Vec::new();
    let mut rate_bound = Vec::new();
    let mut psi_telescoped = Vec::new();
    let mut d_prev = d0;
    for w in steps.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        f_worst = f_worst.max(b.f_val - a.f_val);
        let d_next = bregman(qbar, &b.dual)?;
        let dh = b.sums.hat_eta - a.sums.hat_eta;
        let df0 = b.sums.hat_eta_f - a.sums.hat_eta_f;
        let df1 = b.sums.hat_eta_f_next - a.sums.hat_eta_f_next;
        telescoping.push(SlackPoint::new(a.t, b.t, df1 - f_bar * dh, d_prev - d_next));
        psi_decrease.push(SlackPoint::new(a.t, b.t, df0 + df1, a.psi_val - b.psi_val));
        d_prev = d_next;

        let h = b.sums.hat_eta - s0.sums.hat_eta;
        rate_bound.push(SlackPoint::new(s0.t, b.t, b.f_val - f_bar, d0 / h));
        let lhs = 2.0 * (b.sums.hat_eta_f - s0.sums.hat_eta_f) - s0.eta_hat * s0.f_val;
        psi_telescoped.push(SlackPoint::new(s0.t, b.t, lhs, s0.psi_val - b.psi_val));
    }
    let worst_slack = telescoping
        .iter()
        .chain(&psi_decrease)
        .chain(&rate_bound)
        .chain(&psi_telescoped)
        .map(|s| s.slack)
        .fold(f64::INFINITY, f64::min);
    let f_monotone = f_worst <= MONOTONE_TOL;
    let worst = if worst_slack.is_finite() { worst_slack } else { 0.0 };
    Ok(DualCertificate {
        applicable: true,
        start_t: Some(s0.t),
        mirror_identity_max_err: mirror,
        mirror_pairs_checked: pairs,
        f_monotone,
        f_worst_violation: f_worst,
        telescoping,
        psi_decrease,
        rate_bound,
        psi_telescoped,
        worst_slack: worst,
        passed: f_monotone && worst >= SLACK_FLOOR && mirror <= MIRROR_TOL,
        note: None,
    })
}

/// Largest `gamma ||q_t||_1 - ||Z^T q_t||` over recorded steps; nonpositive in exact arithmetic.
pub fn dual_floor_violation(traj: &Trajectory, gamma: f64) -> f64 {
    traj.steps
        .iter()
        .map(|s| gamma * s.q_l1 - s.ztq_norm)
        .fold(f64::NEG_INFINITY, f64::max)
}
