//! Gradient descent on the empirical risk with primal-dual trajectory recording.
//!
//! Steps are taken through the effective step `eta_hat = eta * l'(psi(p)) / n`
//! and the dual point: `w <- w - eta_hat * Z^T q`. The raw step `eta` is only
//! tracked in log space, since aggressive schedules push it past `f64::MAX`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, max, norm, norm_inf};
use crate::loss::LossFunction;
use crate::smoothed::{grad_psi_at, psi_and_ln_total, DualPoint};

/// Relative tolerance for the nonincreasing effective-step requirement.
pub const ETA_HAT_MONOTONE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSizePolicy {
    ConstantEta { eta: f64 },
    ConstantHatEta { c: f64 },
    /// `eta_t = c / R(w_t)`.
    AggressiveRisk { c: f64 },
    /// `eta_hat_t = c0 / sqrt(t + 1)`.
    InverseSqrtHat { c0: f64 },
    /// `eta_t = 1 / (2 R(w_t))` until the warm-start region is reached, then `eta_hat_t = 1/2`.
    LogisticTwoPhase,
}

impl StepSizePolicy {
    pub fn label(&self) -> String {
        match *self {
            StepSizePolicy::ConstantEta { eta } => format!("constant_eta({eta})"),
            StepSizePolicy::ConstantHatEta { c } => format!("constant_hat_eta({c})"),
            StepSizePolicy::AggressiveRisk { c } => format!("aggressive_risk({c})"),
            StepSizePolicy::InverseSqrtHat { c0 } => format!("inverse_sqrt_hat({c0})"),
            StepSizePolicy::LogisticTwoPhase => "logistic_two_phase".to_string(),
        }
    }

    /// Rejects parameter choices that break the step-size requirements for `loss` on `n` rows.
    pub fn validate(&self, loss: &LossFunction, n: usize) -> Result<()> {
        let positive = |name: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be positive and finite, got {x}")))
            }
        };
        let beta = loss.beta(n);
        let within_beta = |name: &str, c: f64| {
            if c * beta > 1.0 + 1e-12 {
                Err(Error::config(format!(
                    "{name} = {c} exceeds 1/beta = {} for {} on {n} rows",
                    1.0 / beta,
                    loss.label()
                )))
            } else {
                Ok(())
            }
        };
        match *self {
            StepSizePolicy::ConstantEta { eta } => positive("eta", eta),
            StepSizePolicy::ConstantHatEta { c } => {
                positive("eta_hat", c)?;
                within_beta("eta_hat", c)
            }
            StepSizePolicy::AggressiveRisk { c } => {
                positive("c", c)?;
                if loss.is_exp() && c > 1.0 {
                    return Err(Error::config(format!(
                        "aggressive_risk needs c <= 1 for the exponential loss, got {c}"
                    )));
                }
                Ok(())
            }
            StepSizePolicy::InverseSqrtHat { c0 } => {
                positive("c0", c0)?;
                within_beta("c0", c0)
            }
            StepSizePolicy::LogisticTwoPhase => {
                if loss.is_logistic() {
                    Ok(())
                } else {
                    Err(Error::config(format!(
                        "logistic_two_phase needs the logistic loss, got {}",
                        loss.label()
                    )))
                }
            }
        }
    }
}

/// Compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
struct Accumulator {
    sum: f64,
    comp: f64,
}

impl Accumulator {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Sums over all iterations `j < t`, not just the recorded ones.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CumulativeSums {
    /// `sum eta_hat_j`
    pub hat_eta: f64,
    /// `sum eta_hat_j f(q_j)`
    pub hat_eta_f: f64,
    /// `sum eta_hat_j f(q_{j+1})`
    pub hat_eta_f_next: f64,
    /// `sum eta_hat_j ||Z^T q_j||`
    pub hat_eta_ztq: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub t: usize,
    pub w: Vec<f64>,
    /// `q_t = grad psi(p_t)`, anchored at `p_t = Z w_t`.
    pub dual: DualPoint,
    /// May be infinite; `ln_eta` is always finite.
    pub eta: f64,
    pub ln_eta: f64,
    pub eta_hat: f64,
    pub risk: f64,
    pub ln_risk: f64,
    pub ln_total_loss: f64,
    pub psi_val: f64,
    pub f_val: f64,
    /// `Z^T q_t`
    pub ztq: Vec<f64>,
    pub ztq_norm: f64,
    pub q_l1: f64,
    /// `min_i <-z_i, w_t>`
    pub raw_margin: f64,
    pub w_norm: f64,
    pub sums: CumulativeSums,
}

impl TrajectoryStep {
    pub fn p(&self) -> &[f64] {
        self.dual.anchor_p.as_deref().expect("trajectory dual points are anchored")
    }

    pub fn q(&self) -> &[f64] {
        &self.dual.q
    }

    /// `raw_margin / ||w||`, or `None` at `w = 0`.
    pub fn normalized_margin(&self) -> Option<f64> {
        (self.w_norm > 0.0).then(|| self.raw_margin / self.w_norm)
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub loss: LossFunction,
    pub policy: StepSizePolicy,
    pub n: usize,
    pub d: usize,
    pub w0: Vec<f64>,
    pub steps_run: usize,
    pub record_every: usize,
    pub steps: Vec<TrajectoryStep>,
    /// Largest `||p_{t+1} - (p_t - eta_hat_t Z Z^T q_t)||_inf / max(1, ||p_t||_inf)` over every step.
    pub mirror_max_err: f64,
    /// Largest violation of the exponential-loss risk descent inequality, in log units
    /// scaled by `max(1, |ln R_t|)`. Only tracked for the exponential loss with `eta_hat <= 1`.
    pub risk_descent_max_violation: f64,
    /// First iteration in the logistic warm-start region.
    pub phase_switch: Option<usize>,
    /// First index from which every applied step satisfies `eta_hat_j <= 1/beta_j`
    /// and `eta_hat` is nonincreasing; `None` if no step qualifies.
    pub preconditions_from: Option<usize>,
    /// First index from which `eta_hat` is nonincreasing.
    pub eta_hat_monotone_from: usize,
}

impl Trajectory {
    pub fn first(&self) -> &TrajectoryStep {
        &self.steps[0]
    }

    pub fn last(&self) -> &TrajectoryStep {
        self.steps.last().expect("trajectory is never empty")
    }

    pub fn step_at(&self, t: usize) -> Option<&TrajectoryStep> {
        self.steps
            .binary_search_by_key(&t, |s| s.t)
            .ok()
            .map(|i| &self.steps[i])
    }

    pub fn w0_is_zero(&self) -> bool {
        self.w0.iter().all(|&x| x == 0.0)
    }

    /// `eta_hat` never increased over the whole run.
    pub fn eta_hat_nonincreasing(&self) -> bool {
        self.eta_hat_monotone_from == 0
    }
}

/// `R(w) = L(Zw) / n`.
pub fn risk(ds: &Dataset, loss: &LossFunction, w: &[f64]) -> Result<f64> {
    check_dim(ds, w)?;
    let p = ds.zw(w);
    let ln_l = crate::smoothed::ln_total_loss(loss, &p)?;
    Ok((ln_l - (ds.n() as f64).ln()).exp())
}

/// `grad R(w) = Z^T l'(Zw) / n`.
pub fn grad_risk(ds: &Dataset, loss: &LossFunction, w: &[f64]) -> Result<Vec<f64>> {
    check_dim(ds, w)?;
    let p = ds.zw(w);
    let g: Vec<f64> = p.iter().map(|&z| loss.d1(z) / ds.n() as f64).collect();
    Ok(ds.ztq(&g))
}

fn check_dim(ds: &Dataset, w: &[f64]) -> Result<()> {
    if w.len() != ds.d() {
        return Err(Error::domain(format!(
            "weight has dimension {}, data has {}",
            w.len(),
            ds.d()
        )));
    }
    Ok(())
}

struct PointState {
    psi: f64,
    ln_total: f64,
    dual: DualPoint,
    ztq: Vec<f64>,
}

fn evaluate(ds: &Dataset, loss: &LossFunction, w: &[f64], t: usize) -> Result<PointState> {
    let p = ds.zw(w);
    if p.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric {
            t,
            msg: "Zw is not finite".into(),
        });
    }
    let (psi, ln_total) = psi_and_ln_total(loss, &p).map_err(|e| Error::Numeric {
        t,
        msg: e.to_string(),
    })?;
    let dual = grad_psi_at(loss, &p, psi);
    let ztq = ds.ztq(&dual.q);
    if !dual.conj_value.is_finite() || ztq.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric {
            t,
            msg: "dual point is not finite".into(),
        });
    }
    Ok(PointState {
        psi,
        ln_total,
        dual,
        ztq,
    })
}

fn assemble(
    state: &PointState,
    t: usize,
    w: Vec<f64>,
    ln_eta: f64,
    eta_hat: f64,
    ln_n: f64,
    sums: CumulativeSums,
) -> TrajectoryStep {
    let p = state.dual.anchor_p.as_deref().unwrap();
    let ln_risk = state.ln_total - ln_n;
    TrajectoryStep {
        t,
        w_norm: norm(&w),
        w,
        dual: state.dual.clone(),
        eta: ln_eta.exp(),
        ln_eta,
        eta_hat,
        risk: ln_risk.exp(),
        ln_risk,
        ln_total_loss: state.ln_total,
        psi_val: state.psi,
        f_val: 0.5 * dot(&state.ztq, &state.ztq),
        ztq: state.ztq.clone(),
        ztq_norm: norm(&state.ztq),
        q_l1: state.dual.l1_mass(),
        raw_margin: -max(p),
        sums,
    }
}

/// Recomputes a recorded step from its iterate and logged step data.
///
/// Gives the same values as the original run, since every derived quantity is
/// a deterministic function of `w`.
pub fn rebuild_step(
    ds: &Dataset,
    loss: &LossFunction,
    t: usize,
    w: Vec<f64>,
    ln_eta: f64,
    eta_hat: f64,
    sums: CumulativeSums,
) -> Result<TrajectoryStep> {
    check_dim(ds, &w)?;
    let state = evaluate(ds, loss, &w, t)?;
    Ok(assemble(&state, t, w, ln_eta, eta_hat, (ds.n() as f64).ln(), sums))
}

/// Runs `steps` iterations of gradient descent from `w0`.
///
/// Records iterations `t` with `t % record_every == 0`, the final iterate, and
/// the logistic phase switch. Aborts with [`Error::Numeric`] on non-finite
/// values, or when `eta_hat` increases under a policy that promises otherwise.
pub fn run_gd(
    ds: &Dataset,
    loss: &LossFunction,
    policy: StepSizePolicy,
    w0: &[f64],
    steps: usize,
    record_every: usize,
) -> Result<Trajectory> {
    check_dim(ds, w0)?;
    if record_every == 0 {
        return Err(Error::config("record_every must be at least 1"));
    }
    policy.validate(loss, ds.n())?;
    let n = ds.n();
    let ln_n = (n as f64).ln();
    let ln_threshold = loss.ln_warm_start_threshold();

    let mut w = w0.to_vec();
    let mut state = evaluate(ds, loss, &w, 0)?;
    let mut recorded = Vec::new();
    let mut sum_h = Accumulator::default();
    let mut sum_hf = Accumulator::default();
    let mut sum_hf_next = Accumulator::default();
    let mut sum_hz = Accumulator::default();
    let mut mirror_max_err = 0.0f64;
    let mut risk_descent_max_violation = f64::NEG_INFINITY;
    let mut phase_switch = None;
    let mut prev_eta_hat: Option<f64> = None;
    let mut monotone_from = 0usize;
    let mut beta_ok_from = 0usize;

    for t in 0..=steps {
        let f_val = 0.5 * dot(&state.ztq, &state.ztq);
        let ztq_norm = norm(&state.ztq);
        if let Some(h) = prev_eta_hat {
            sum_hf_next.add(h * f_val);
        }
        let ln_risk = state.ln_total - ln_n;
        let ln_d1_psi = loss.ln_d1(state.psi);
        let in_region = loss.is_logistic() && state.ln_total <= ln_threshold;

        if policy == StepSizePolicy::LogisticTwoPhase && in_region && phase_switch.is_none() {
            phase_switch = Some(t);
        }

        let (ln_eta, eta_hat) = match policy {
            StepSizePolicy::ConstantEta { eta } => {
                let ln_eta = eta.ln();
                (ln_eta, (ln_eta + ln_d1_psi - ln_n).exp())
            }
            StepSizePolicy::ConstantHatEta { c } => (c.ln() + ln_n - ln_d1_psi, c),
            StepSizePolicy::AggressiveRisk { c } => {
                let ln_eta = c.ln() - ln_risk;
                let eta_hat = if loss.is_exp() {
                    c
                } else {
                    (ln_eta + ln_d1_psi - ln_n).exp()
                };
                (ln_eta, eta_hat)
            }
            StepSizePolicy::InverseSqrtHat { c0 } => {
                let eta_hat = c0 / ((t + 1) as f64).sqrt();
                (eta_hat.ln() + ln_n - ln_d1_psi, eta_hat)
            }
            StepSizePolicy::LogisticTwoPhase => {
                if phase_switch.is_some() {
                    (0.5f64.ln() + ln_n - ln_d1_psi, 0.5)
                } else {
                    let ln_eta = -std::f64::consts::LN_2 - ln_risk;
                    (ln_eta, (ln_eta + ln_d1_psi - ln_n).exp())
                }
            }
        };
        if !(eta_hat.is_finite() && eta_hat > 0.0) || ln_eta.is_nan() {
            return Err(Error::Numeric {
                t,
                msg: format!("effective step {eta_hat} is not a positive number"),
            });
        }

        if let Some(prev) = prev_eta_hat {
            if eta_hat > prev * (1.0 + ETA_HAT_MONOTONE_TOL) {
                if policy != StepSizePolicy::LogisticTwoPhase {
                    return Err(Error::Numeric {
                        t,
                        msg: format!("effective step increased from {prev} to {eta_hat}"),
                    });
                }
                if t < steps {
                    monotone_from = t;
                }
            }
        }
        let beta_t = match loss.beta_sublevel() {
            Some(b) if in_region => b,
            _ => loss.beta(n),
        };
        // the final step size is never applied
        if t < steps && eta_hat * beta_t > 1.0 + ETA_HAT_MONOTONE_TOL {
            beta_ok_from = t + 1;
        }

        let record = t % record_every == 0 || t == steps || phase_switch == Some(t);
        let p_norm_inf = norm_inf(state.dual.anchor_p.as_deref().unwrap());
        if record {
            let sums = CumulativeSums {
                hat_eta: sum_h.value(),
                hat_eta_f: sum_hf.value(),
                hat_eta_f_next: sum_hf_next.value(),
                hat_eta_ztq: sum_hz.value(),
            };
            recorded.push(assemble(&state, t, w.clone(), ln_eta, eta_hat, ln_n, sums));
        }
        if t == steps {
            break;
        }

        sum_h.add(eta_hat);
        sum_hf.add(eta_hat * f_val);
        sum_hz.add(eta_hat * ztq_norm);
        prev_eta_hat = Some(eta_hat);

        axpy(-eta_hat, &state.ztq, &mut w);
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                t: t + 1,
                msg: "iterate is not finite".into(),
            });
        }
        let next = evaluate(ds, loss, &w, t + 1)?;

        // p_{t+1} against p_t - eta_hat Z Z^T q_t
        let zg = ds.zw(&state.ztq);
        let p_old = state.dual.anchor_p.as_deref().unwrap();
        let p_new = next.dual.anchor_p.as_deref().unwrap();
        let err = p_new
            .iter()
            .zip(p_old.iter().zip(&zg))
            .map(|(a, (b, g))| (a - (b - eta_hat * g)).abs())
            .fold(0.0, f64::max);
        mirror_max_err = mirror_max_err.max(err / p_norm_inf.max(1.0));

        if loss.is_exp() && eta_hat <= 1.0 {
            let decrease = eta_hat * (1.0 - eta_hat / 2.0) * 2.0 * f_val;
            let bound = (-decrease).ln_1p();
            let v = (next.ln_total - state.ln_total) - bound;
            let scale = ln_risk.abs().max(1.0);
            risk_descent_max_violation = risk_descent_max_violation.max(v / scale);
        }
        state = next;
    }

    let preconditions_from = {
        let s = monotone_from.max(beta_ok_from);
        (s < steps).then_some(s)
    };
    Ok(Trajectory {
        loss: *loss,
        policy,
        n,
        d: ds.d(),
        w0: w0.to_vec(),
        steps_run: steps,
        record_every,
        steps: recorded,
        mirror_max_err,
        risk_descent_max_violation: risk_descent_max_violation.max(0.0),
        phase_switch,
        preconditions_from,
        eta_hat_monotone_from: monotone_from,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmStart {
    pub t0: usize,
    pub w_norm: f64,
    pub psi: f64,
    pub ln_total_loss: f64,
    /// `(256 ln n / gamma)^2`
    pub bound_t0: f64,
    /// `256 ln n / gamma`
    pub bound_w_norm: f64,
    /// Whether the count and norm bounds were asserted; they are void for `n = 1`.
    pub bounds_apply: bool,
    pub within_bounds: bool,
}

/// First recorded iterate in the logistic warm-start region `L(Zw) <= l(0) / (2 e^2)`.
pub fn detect_warm_start(traj: &Trajectory, gamma: f64) -> Result<WarmStart> {
    if !traj.loss.is_logistic() {
        return Err(Error::usage("warm start detection needs the logistic loss"));
    }
    let thr = traj.loss.ln_warm_start_threshold();
    let step = traj
        .steps
        .iter()
        .find(|s| s.ln_total_loss <= thr)
        .ok_or_else(|| {
            Error::Convergence(format!(
                "warm-start region not reached in {} steps; final total loss {:.6e} vs threshold {:.6e}",
                traj.steps_run,
                traj.last().ln_total_loss.exp(),
                thr.exp()
            ))
        })?;
    let c = 256.0 * (traj.n as f64).ln() / gamma;
    let bounds_apply = traj.n >= 2;
    let within = step.psi_val <= 0.0
        && (!bounds_apply || (step.t as f64 <= c * c && step.w_norm <= c));
    Ok(WarmStart {
        t0: step.t,
        w_norm: step.w_norm,
        psi: step.psi_val,
        ln_total_loss: step.ln_total_loss,
        bound_t0: c * c,
        bound_w_norm: c,
        bounds_apply,
        within_bounds: within,
    })
}
